//! Coarse-stage inference on target frames and conversion of the raw
//! probability maps into cleaned pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::dbscan::{dbscan, ClusterParams};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Sample};
use crate::model::ModelState;
use crate::prompt::BoxPrompt;

/// Per-pixel foreground probability.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub prob: Grid<f32>,
}

impl RawPrediction {
    pub fn threshold(&self, t: f32) -> Mask {
        self.prob.map(|&p| u8::from(p >= t))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub size: usize,
    pub bbox: BoxPrompt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub source_frame: String,
    pub mask: Mask,
    pub cluster_stats: Vec<ClusterStat>,
    pub low_confidence: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub frame: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Vec<PseudoLabel>,
    pub failures: Vec<FrameFailure>,
}

/// Sigmoid of the plain-head logits.
pub fn infer_raw(model: &ModelState, image: &crate::grid::Image) -> Result<RawPrediction> {
    let z = model.encode_image(image)?;
    let logits = model.plain_decode(&z)?;
    let prob = logits.probabilities().into_iter().map(|p| p as f32).collect();
    Ok(RawPrediction {
        prob: Grid::from_vec(logits.height, logits.width, prob)?,
    })
}

/// Threshold, cluster the foreground pixels, and keep clusters that pass the
/// size filter (and, if set, the top-k filter).
pub fn filter_clusters(raw: &RawPrediction, threshold: f32, params: &ClusterParams, frame: &str) -> Result<PseudoLabel> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param("threshold", "must lie in (0, 1)"));
    }
    params.validate()?;
    let binary = raw.threshold(threshold);
    let fg = binary.foreground();
    let pts: Vec<(f64, f64)> = fg.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
    let labels = dbscan(&pts, params.eps, params.min_pts);
    let n_clusters = labels.iter().filter_map(|l| l.cluster()).max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_clusters];
    for (&p, l) in fg.iter().zip(&labels) {
        if let Some(c) = l.cluster() {
            members[c].push(p);
        }
    }
    let mut kept: Vec<usize> = (0..n_clusters)
        .filter(|&c| members[c].len() >= params.min_cluster_size)
        .collect();
    if let Some(k) = params.keep_top_k {
        kept.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));
        kept.truncate(k);
        kept.sort_unstable();
    }
    let (h, w) = binary.dims();
    let mut mask = Mask::filled(h, w, 0);
    let mut stats = Vec::with_capacity(kept.len());
    for &c in &kept {
        let mut bbox = BoxPrompt { row_min: usize::MAX, col_min: usize::MAX, row_max: 0, col_max: 0 };
        for &(r, col) in &members[c] {
            mask.set(r, col, 1);
            bbox.row_min = bbox.row_min.min(r);
            bbox.col_min = bbox.col_min.min(col);
            bbox.row_max = bbox.row_max.max(r);
            bbox.col_max = bbox.col_max.max(col);
        }
        stats.push(ClusterStat { size: members[c].len(), bbox });
    }
    Ok(PseudoLabel {
        source_frame: frame.to_string(),
        low_confidence: stats.is_empty(),
        mask,
        cluster_stats: stats,
    })
}

/// One label per frame, in input order. A frame that fails gets an empty,
/// low-confidence label and a failure record.
pub fn generate_pseudo_labels(
    model: &ModelState,
    frames: &[Sample],
    threshold: f32,
    params: &ClusterParams,
) -> Result<PseudoLabelBatch> {
    params.validate()?;
    let results = crate::par::map(frames, |s| {
        infer_raw(model, &s.image).and_then(|raw| filter_clusters(&raw, threshold, params, &s.id))
    });
    let mut labels = Vec::with_capacity(frames.len());
    let mut failures = Vec::new();
    for (s, r) in frames.iter().zip(results) {
        match r {
            Ok(l) => labels.push(l),
            Err(e) => {
                failures.push(FrameFailure { frame: s.id.clone(), error: e.to_string() });
                labels.push(PseudoLabel {
                    source_frame: s.id.clone(),
                    mask: Mask::filled(s.image.height(), s.image.width(), 0),
                    cluster_stats: Vec::new(),
                    low_confidence: true,
                });
            }
        }
    }
    Ok(PseudoLabelBatch { labels, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{label_components, DomainTag, Image};
    use crate::model::{DecoderKind, ModelConfig};
    use proptest::prelude::*;

    fn raw_from(mask: &Mask) -> RawPrediction {
        RawPrediction { prob: mask.map(|&v| if v == 1 { 0.9 } else { 0.1 }) }
    }

    #[test]
    fn empty_foreground_is_low_confidence() {
        let raw = RawPrediction { prob: Grid::filled(8, 8, 0.2) };
        let l = filter_clusters(&raw, 0.5, &ClusterParams::default(), "f").unwrap();
        assert!(l.low_confidence);
        assert_eq!(l.mask.foreground_count(), 0);
        assert!(filter_clusters(&raw, 0.0, &ClusterParams::default(), "f").is_err());
    }

    #[test]
    fn snake_survives_isolated_pixels_do_not() {
        let mut m = Mask::filled(64, 64, 0);
        // 200-pixel serpentine: five 36-px rows joined by 5-px vertical runs.
        let mut n = 0;
        for k in 0..5 {
            let r = 5 + k * 6;
            for c in 10..46 {
                m.set(r, c, 1);
            }
            n += 36;
            if k < 4 {
                let c = if k % 2 == 0 { 45 } else { 10 };
                for dr in 1..6 {
                    m.set(r + dr, c, 1);
                }
                n += 5;
            }
        }
        assert_eq!(n, 200);
        assert_eq!(m.foreground_count(), 200);
        let snake = m.clone();
        for &(r, c) in &[(60, 60), (2, 60), (60, 2)] {
            m.set(r, c, 1);
        }
        let params = ClusterParams { min_cluster_size: 10, ..Default::default() };
        let l = filter_clusters(&raw_from(&m), 0.5, &params, "f").unwrap();
        assert_eq!(l.mask, snake);
        assert_eq!(l.cluster_stats.len(), 1);
        assert!(!l.low_confidence);
    }

    #[test]
    fn keep_top_k_keeps_the_largest() {
        let mut m = Mask::filled(40, 40, 0);
        for c in 0..25 {
            m.set(5, c, 1);
            m.set(6, c, 1);
        }
        for c in 0..8 {
            m.set(30, c + 10, 1);
        }
        let params = ClusterParams { min_pts: 2, min_cluster_size: 1, keep_top_k: Some(1), ..Default::default() };
        let l = filter_clusters(&raw_from(&m), 0.5, &params, "f").unwrap();
        assert_eq!(l.cluster_stats, vec![ClusterStat { size: 50, bbox: BoxPrompt { row_min: 5, col_min: 0, row_max: 6, col_max: 24 } }]);
        assert_eq!(l.mask.foreground_count(), 50);
    }

    #[test]
    fn batch_preserves_order_and_count() {
        let cfg = ModelConfig {
            image_size: (32, 32),
            patch_size: 8,
            embed_dim: 16,
            encoder_layers: 1,
            attention_heads: 2,
            decoder_kind: DecoderKind::PlainConvHead,
            ..ModelConfig::default()
        };
        let model = ModelState::new(cfg, 1).unwrap();
        let mut frames: Vec<Sample> = (0..3)
            .map(|i| Sample::new(format!("t{i}"), Image::from_fn(32, 32, |r, c| ((r * 7 + c * i) % 255) as f32), None, DomainTag::Target).unwrap())
            .collect();
        frames.push(Sample::new("bad", Image::filled(16, 16, 0.0), None, DomainTag::Target).unwrap());
        let a = generate_pseudo_labels(&model, &frames, 0.5, &ClusterParams::default()).unwrap();
        let b = generate_pseudo_labels(&model, &frames, 0.5, &ClusterParams::default()).unwrap();
        assert_eq!(a, b);
        let ids: Vec<_> = a.labels.iter().map(|l| l.source_frame.as_str()).collect();
        assert_eq!(ids, ["t0", "t1", "t2", "bad"]);
        assert_eq!(a.failures.len(), 1);
        assert_eq!(a.failures[0].frame, "bad");
        let raw = infer_raw(&model, &frames[0].image).unwrap();
        assert!(raw.prob.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    proptest! {
        #[test]
        fn output_is_subset_and_clusters_are_whole(
            cells in prop::collection::vec(any::<bool>(), 24 * 24),
            min_size in 1usize..12,
        ) {
            let m = Mask::from_vec(24, 24, cells.iter().map(|&b| u8::from(b)).collect()).unwrap();
            let params = ClusterParams { eps: 1.5, min_pts: 1, min_cluster_size: min_size, keep_top_k: None };
            let l = filter_clusters(&raw_from(&m), 0.5, &params, "p").unwrap();
            for (o, i) in l.mask.data().iter().zip(m.data()) {
                prop_assert!(*o <= *i);
            }
            // With eps 1.5 and min_pts 1 every 8-connected component is one cluster.
            let (labels, n) = label_components(&m);
            let mut sizes = vec![0usize; n + 1];
            for &c in &labels {
                sizes[c as usize] += 1;
            }
            for (idx, &c) in labels.iter().enumerate() {
                if c > 0 {
                    prop_assert_eq!(l.mask.data()[idx] == 1, sizes[c as usize] >= min_size);
                }
            }
            let total: usize = l.cluster_stats.iter().map(|s| s.size).sum();
            prop_assert_eq!(total, l.mask.foreground_count());
        }
    }
}

//! Pixel-level IoU / F1 / accuracy / sensitivity and dataset aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub f1: f64,
    pub acc: f64,
    pub sen: f64,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    pred.check_dims(gt)?;
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::param("mask", "confusion expects binary masks"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// IoU and sensitivity are 1 when their denominators vanish (both masks empty);
/// F1 follows IoU through the same convention.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let union = tp + fp + fn_;
    let iou = if union == 0.0 { 1.0 } else { tp / union };
    let f1 = if union == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let total = tp + fp + fn_ + tn;
    let acc = if total == 0.0 { 1.0 } else { (tp + tn) / total };
    let sen = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
    Metrics { iou, f1, acc, sen }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MeanPerFrame,
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation: Aggregation,
    /// Aggregate under `aggregation`.
    pub summary: Metrics,
    pub mean_per_frame: Metrics,
    pub micro: Metrics,
    pub frames: Vec<FrameRow>,
}

impl MetricsReport {
    /// One CSV row per frame, percentages with two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,tp,fp,fn,tn,iou,f1,acc,sen\n");
        for f in &self.frames {
            let m = &f.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{:.2},{:.2},{:.2},{:.2}\n",
                f.id,
                f.counts.tp,
                f.counts.fp,
                f.counts.fn_,
                f.counts.tn,
                100.0 * m.iou,
                100.0 * m.f1,
                100.0 * m.acc,
                100.0 * m.sen
            ));
        }
        out
    }

    /// `IoU F1 Acc Sen` as percentages with two decimals.
    pub fn table_row(&self) -> String {
        let m = &self.summary;
        format!(
            "{:.2} {:.2} {:.2} {:.2}",
            100.0 * m.iou,
            100.0 * m.f1,
            100.0 * m.acc,
            100.0 * m.sen
        )
    }
}

pub fn evaluate_dataset(
    ids: &[String],
    preds: &[Mask],
    gts: &[Mask],
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() || ids.len() != preds.len() {
        return Err(Error::shape(
            format!("{} predictions", gts.len()),
            format!("{} predictions, {} ids", preds.len(), ids.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let counts = crate::par::map_range(preds.len(), |i| confusion(&preds[i], &gts[i]));
    let mut frames = Vec::with_capacity(preds.len());
    for (id, c) in ids.iter().zip(counts) {
        let c = c?;
        frames.push(FrameRow {
            id: id.clone(),
            counts: c,
            metrics: metrics(&c),
        });
    }
    let n = frames.len() as f64;
    let mut mean = Metrics::default();
    let mut sum = ConfusionCounts::default();
    for f in &frames {
        mean.iou += f.metrics.iou / n;
        mean.f1 += f.metrics.f1 / n;
        mean.acc += f.metrics.acc / n;
        mean.sen += f.metrics.sen / n;
        sum = sum + f.counts;
    }
    let micro = metrics(&sum);
    let summary = match aggregation {
        Aggregation::MeanPerFrame => mean,
        Aggregation::Micro => micro,
    };
    Ok(MetricsReport {
        aggregation,
        summary,
        mean_per_frame: mean,
        micro,
        frames,
    })
}

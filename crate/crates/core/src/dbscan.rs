//! Density-based clustering of 2-D points.
//!
//! Points are visited in input order; a border point reachable from several
//! clusters joins the first one expanded.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    /// Neighbourhood radius in pixels (inclusive).
    pub eps: f64,
    /// Neighbours (self included) needed for a core point.
    pub min_pts: usize,
    pub min_cluster_size: usize,
    pub keep_top_k: Option<usize>,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            eps: 3.0,
            min_pts: 4,
            min_cluster_size: 20,
            keep_top_k: None,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::param("cluster.eps", "must be a positive number"));
        }
        if self.min_pts == 0 {
            return Err(Error::param("cluster.min_pts", "must be at least 1"));
        }
        if self.min_cluster_size == 0 {
            return Err(Error::param("cluster.min_cluster_size", "must be at least 1"));
        }
        if self.keep_top_k == Some(0) {
            return Err(Error::param("cluster.keep_top_k", "must be at least 1 when set"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointLabel {
    Noise,
    Cluster(usize),
}

impl PointLabel {
    pub fn cluster(self) -> Option<usize> {
        match self {
            PointLabel::Noise => None,
            PointLabel::Cluster(c) => Some(c),
        }
    }
}

struct SpatialIndex<'a> {
    points: &'a [(f64, f64)],
    eps: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> SpatialIndex<'a> {
    fn new(points: &'a [(f64, f64)], eps: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in points.iter().enumerate() {
            cells.entry(Self::cell(p, eps)).or_default().push(i);
        }
        SpatialIndex { points, eps, cells }
    }

    fn cell((x, y): (f64, f64), eps: f64) -> (i64, i64) {
        ((x / eps).floor() as i64, (y / eps).floor() as i64)
    }

    /// Indices within `eps` of point `i`, ascending.
    fn neighbours(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let p = self.points[i];
        let (cx, cy) = Self::cell(p, self.eps);
        let e2 = self.eps * self.eps;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        let q = self.points[j];
                        let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
                        if d2 <= e2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// One label per input point; cluster ids are dense and numbered in
/// discovery order.
pub fn dbscan(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<PointLabel> {
    let index = SpatialIndex::new(points, eps);
    let mut labels: Vec<Option<PointLabel>> = vec![None; points.len()];
    let mut next = 0;
    let mut nb = Vec::new();
    let mut queue = Vec::new();
    for i in 0..points.len() {
        if labels[i].is_some() {
            continue;
        }
        index.neighbours(i, &mut nb);
        if nb.len() < min_pts {
            labels[i] = Some(PointLabel::Noise);
            continue;
        }
        let c = next;
        next += 1;
        labels[i] = Some(PointLabel::Cluster(c));
        queue.clear();
        queue.extend(nb.iter().copied().filter(|&j| j != i));
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            match labels[q] {
                Some(PointLabel::Noise) => {
                    labels[q] = Some(PointLabel::Cluster(c));
                    continue;
                }
                Some(PointLabel::Cluster(_)) => continue,
                None => {}
            }
            labels[q] = Some(PointLabel::Cluster(c));
            index.neighbours(q, &mut nb);
            if nb.len() >= min_pts {
                queue.extend(nb.iter().copied().filter(|&j| labels[j].is_none() || labels[j] == Some(PointLabel::Noise)));
            }
        }
    }
    labels.into_iter().map(|l| l.expect("every point visited")).collect()
}

#[cfg(test)]
pub(crate) mod reference {
    use super::PointLabel;

    /// Quadratic-time textbook implementation.
    pub fn dbscan(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<PointLabel> {
        let n = points.len();
        let near = |i: usize| -> Vec<usize> {
            (0..n)
                .filter(|&j| {
                    let (a, b) = (points[i], points[j]);
                    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2) <= eps * eps
                })
                .collect()
        };
        let mut labels: Vec<Option<PointLabel>> = vec![None; n];
        let mut c = 0;
        for i in 0..n {
            if labels[i].is_some() {
                continue;
            }
            let nb = near(i);
            if nb.len() < min_pts {
                labels[i] = Some(PointLabel::Noise);
                continue;
            }
            labels[i] = Some(PointLabel::Cluster(c));
            let mut seeds: Vec<usize> = nb;
            let mut k = 0;
            while k < seeds.len() {
                let q = seeds[k];
                k += 1;
                if labels[q] == Some(PointLabel::Noise) {
                    labels[q] = Some(PointLabel::Cluster(c));
                }
                if labels[q].is_some() {
                    continue;
                }
                labels[q] = Some(PointLabel::Cluster(c));
                let nq = near(q);
                if nq.len() >= min_pts {
                    seeds.extend(nq);
                }
            }
            c += 1;
        }
        labels.into_iter().map(Option::unwrap).collect()
    }
}

/// True when both labelings put the same points in noise and induce the same
/// partition of the rest.
pub fn same_partition(a: &[PointLabel], b: &[PointLabel]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (PointLabel::Noise, PointLabel::Noise) => {}
            (PointLabel::Cluster(p), PointLabel::Cluster(q)) => {
                if *ab.entry(p).or_insert(q) != q || *ba.entry(q).or_insert(p) != p {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count(labels: &[PointLabel]) -> (usize, usize) {
        let clusters = labels.iter().filter_map(|l| l.cluster()).max().map_or(0, |m| m + 1);
        let noise = labels.iter().filter(|l| **l == PointLabel::Noise).count();
        (clusters, noise)
    }

    #[test]
    fn single_point_is_its_own_cluster() {
        assert_eq!(dbscan(&[(3.0, 4.0)], 1.0, 1), vec![PointLabel::Cluster(0)]);
        assert!(dbscan(&[], 1.0, 1).is_empty());
    }

    #[test]
    fn two_far_blobs() {
        let mut pts = Vec::new();
        for cx in [0.0, 100.0] {
            for i in 0..20 {
                pts.push((cx + (i % 5) as f64, (i / 5) as f64));
            }
        }
        let labels = dbscan(&pts, 2.0, 3);
        assert_eq!(count(&labels), (2, 0));
        assert!(same_partition(&labels, &reference::dbscan(&pts, 2.0, 3)));
    }

    #[test]
    fn sparse_points_are_noise() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64 * 5.0, 0.0)).collect();
        assert!(dbscan(&pts, 2.0, 2).iter().all(|l| *l == PointLabel::Noise));
    }

    #[test]
    fn eps_is_inclusive_and_duplicates_count() {
        let labels = dbscan(&[(0.0, 0.0), (3.0, 0.0)], 3.0, 2);
        assert_eq!(labels, vec![PointLabel::Cluster(0); 2]);
        let labels = dbscan(&[(1.0, 1.0), (1.0, 1.0)], 0.5, 2);
        assert_eq!(labels, vec![PointLabel::Cluster(0); 2]);
    }

    #[test]
    fn border_point_joins_first_cluster() {
        // Two dense columns sharing one border point in the middle.
        let mut pts = vec![(5.0, 0.0)];
        for i in 0..4 {
            pts.push((4.0, i as f64 - 1.5));
            pts.push((6.0, i as f64 - 1.5 + 50.0));
        }
        pts.extend((0..4).map(|i| (6.0, i as f64 * 0.1)));
        let labels = dbscan(&pts, 1.2, 4);
        assert!(same_partition(&labels, &reference::dbscan(&pts, 1.2, 4)));
    }

    #[test]
    fn validation() {
        assert!(ClusterParams::default().validate().is_ok());
        assert!(ClusterParams { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(ClusterParams { min_pts: 0, ..Default::default() }.validate().is_err());
        assert!(ClusterParams { keep_top_k: Some(0), ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn matches_reference(
            pts in prop::collection::vec((0i32..40, 0i32..40), 0..120),
            eps in 0.5f64..4.0,
            min_pts in 1usize..6,
        ) {
            let pts: Vec<(f64, f64)> = pts.into_iter().map(|(x, y)| (x as f64, y as f64)).collect();
            let fast = dbscan(&pts, eps, min_pts);
            let slow = reference::dbscan(&pts, eps, min_pts);
            prop_assert!(same_partition(&fast, &slow));
        }
    }
}

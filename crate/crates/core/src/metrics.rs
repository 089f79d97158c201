//! Class compactness of learned representations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;

#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteReport {
    pub scores: Vec<f64>,
    /// Mean score per label, ordered by label.
    pub class_means: Vec<(usize, f64)>,
    pub overall: f64,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_inputs(points: &Tensor, labels: &[usize]) -> Result<()> {
    if points.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "silhouette",
            left: points.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if labels.len() < 3 {
        return Err(Error::Domain("silhouette needs at least 3 points".into()));
    }
    Ok(())
}

fn score(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == 0.0 {
        0.0
    } else {
        (b - a) / m
    }
}

/// Euclidean silhouette per point: `(b − a) / max(a, b)`, with `a` the mean
/// distance to the rest of the point's own cluster and `b` the smallest mean
/// distance to another cluster. Singleton clusters score 0.
///
/// Rows are processed in parallel; each row's sums are accumulated in index
/// order, so the result does not depend on the thread count.
pub fn silhouette(points: &Tensor, labels: &[usize]) -> Result<SilhouetteReport> {
    check_inputs(points, labels)?;
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Domain("silhouette needs at least 2 clusters".into()));
    }
    let dense: Vec<usize> = labels
        .iter()
        .map(|l| ids.binary_search(l).expect("label present"))
        .collect();
    let mut sizes = vec![0usize; ids.len()];
    for &c in &dense {
        sizes[c] += 1;
    }

    let scores: Vec<f64> = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let own = dense[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let xi = points.row(i);
            let mut sums = vec![0.0; ids.len()];
            for (j, xj) in points.row_iter().enumerate() {
                if j != i {
                    sums[dense[j]] += distance(xi, xj);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..ids.len())
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            score(a, b)
        })
        .collect();

    let mut class_means = Vec::with_capacity(ids.len());
    for (c, &label) in ids.iter().enumerate() {
        let total: f64 = scores.iter().zip(&dense).filter(|(_, &d)| d == c).map(|(s, _)| s).sum();
        class_means.push((label, total / sizes[c] as f64));
    }
    let overall = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(SilhouetteReport {
        scores,
        class_means,
        overall,
    })
}

/// Reference mean silhouette: plain serial double loops with no shared
/// bookkeeping, for checking [`silhouette`].
pub fn silhouette_oracle(points: &Tensor, labels: &[usize]) -> Result<f64> {
    check_inputs(points, labels)?;
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::Domain("silhouette needs at least 2 clusters".into()));
    }
    let mut total = 0.0;
    for i in 0..labels.len() {
        let own = &clusters[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let mut a = 0.0;
        for &j in own {
            if j != i {
                a += distance(points.row(i), points.row(j));
            }
        }
        a /= (own.len() - 1) as f64;
        let mut b = f64::INFINITY;
        for (&label, members) in &clusters {
            if label == labels[i] {
                continue;
            }
            let mut d = 0.0;
            for &j in members {
                d += distance(points.row(i), points.row(j));
            }
            b = b.min(d / members.len() as f64);
        }
        total += score(a, b);
    }
    Ok(total / labels.len() as f64)
}

/// Raw and normalized penultimate representations of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub raw: Tensor,
    pub normalized: Tensor,
    pub labels: Vec<usize>,
}

impl Snapshot {
    /// CSV `x0..x{d-1},label,kind` with raw rows first, then normalized.
    pub fn to_csv(&self) -> String {
        let d = self.raw.cols();
        let mut out = String::new();
        for j in 0..d {
            let _ = write!(out, "x{j},");
        }
        out.push_str("label,kind\n");
        for (kind, t) in [("raw", &self.raw), ("norm", &self.normalized)] {
            for (row, label) in t.row_iter().zip(&self.labels) {
                for v in row {
                    let _ = write!(out, "{v},");
                }
                let _ = writeln!(out, "{label},{kind}");
            }
        }
        out
    }
}

pub fn representation_snapshot(c: &Classifier, data: &Dataset) -> Result<Snapshot> {
    let out = c.forward(&data.points)?;
    Ok(Snapshot {
        raw: out.penultimate,
        normalized: out.normalized,
        labels: data.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_three_points() {
        let pts = Tensor::from_rows(&[[0.0, 0.0], [0.0, 1.0], [5.0, 0.0]]).unwrap();
        let r = silhouette(&pts, &[0, 0, 1]).unwrap();
        assert!((r.scores[0] - 0.8).abs() < 1e-15);
        let s26 = 26f64.sqrt();
        assert!((r.scores[1] - (s26 - 1.0) / s26).abs() < 1e-15);
        assert!((r.scores[1] - 0.8039).abs() < 1e-4);
        assert_eq!(r.scores[2], 0.0);
        let mean = (r.scores[0] + r.scores[1]) / 3.0;
        assert!((r.overall - mean).abs() < 1e-15);
        assert_eq!(r.class_means[1], (1, 0.0));
    }

    #[test]
    fn tight_far_pairs() {
        let pts = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.01], [10.0, 10.0], [10.0, 10.01]]).unwrap();
        let r = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        let oracle = silhouette_oracle(&pts, &[0, 0, 1, 1]).unwrap();
        assert!((r.overall - oracle).abs() < 1e-12);
        assert!((r.overall - 0.9993).abs() < 1e-4, "{}", r.overall);
    }

    #[test]
    fn interleaved_clusters_score_negative() {
        // Alternate labels along a line: each point's neighbours belong to
        // the other cluster.
        let rows: Vec<[f64; 1]> = (0..8).map(|i| [i as f64]).collect();
        let pts = Tensor::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let r = silhouette(&pts, &labels).unwrap();
        assert!(r.overall < 0.0, "{}", r.overall);
        assert!((r.overall - silhouette_oracle(&pts, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let pts = Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert!(silhouette(&pts, &[4, 4, 4]).is_err());
        assert!(silhouette_oracle(&pts, &[4, 4, 4]).is_err());
        let two = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(silhouette(&two, &[0, 1]).is_err());
        assert!(silhouette(&pts, &[0, 1]).is_err());
    }

    #[test]
    fn sparse_labels_are_fine() {
        let pts = Tensor::from_rows(&[[0.0], [0.1], [5.0], [5.2]]).unwrap();
        let r = silhouette(&pts, &[7, 7, 3, 3]).unwrap();
        assert_eq!(r.class_means.iter().map(|c| c.0).collect::<Vec<_>>(), vec![3, 7]);
        assert!((r.overall - silhouette_oracle(&pts, &[7, 7, 3, 3]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn snapshot_csv_layout() {
        let s = Snapshot {
            raw: Tensor::from_rows(&[[1.0, 2.0]]).unwrap(),
            normalized: Tensor::from_rows(&[[0.5, 1.0]]).unwrap(),
            labels: vec![1],
        };
        assert_eq!(s.to_csv(), "x0,x1,label,kind\n1,2,1,raw\n0.5,1,1,norm\n");
    }
}

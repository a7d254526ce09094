use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteResult {
    pub per_point: Vec<f64>,
    pub mean: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Silhouette of every point under `labels`, Euclidean metric.
///
/// `S(i) = (b − a) / max(a, b)` where `a` is the mean distance to the other
/// members of the point's cluster and `b` the smallest mean distance to
/// another cluster. Points alone in their cluster score 0, as do points
/// with `a = b = 0`.
pub fn silhouette<L: Ord + Copy>(points: &[Vec<f64>], labels: &[L]) -> Result<SilhouetteResult> {
    if points.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if let Some(first) = points.first() {
        if points.iter().any(|p| p.len() != first.len()) {
            return Err(Error::Dimension("points must share one dimension".into()));
        }
    }
    let mut sizes: BTreeMap<L, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::Degenerate(format!(
            "silhouette needs at least two clusters, found {}",
            sizes.len()
        )));
    }

    let mut per_point = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let own = labels[i];
        if sizes[&own] == 1 {
            per_point.push(0.0);
            continue;
        }
        let mut sums: BTreeMap<L, f64> = sizes.keys().map(|&l| (l, 0.0)).collect();
        for (j, q) in points.iter().enumerate() {
            if j != i {
                *sums.get_mut(&labels[j]).expect("label counted") += euclidean(p, q);
            }
        }
        let a = sums[&own] / (sizes[&own] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != own)
            .map(|(l, s)| s / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        per_point.push(if denom > 0.0 { (b - a) / denom } else { 0.0 });
    }
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(SilhouetteResult { per_point, mean })
}

/// Mean silhouette of the points carrying each label.
pub fn mean_by_label<L: Ord + Copy>(result: &SilhouetteResult, labels: &[L]) -> BTreeMap<L, f64> {
    let mut acc: BTreeMap<L, (f64, usize)> = BTreeMap::new();
    for (&s, &l) in result.per_point.iter().zip(labels) {
        let e = acc.entry(l).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
}

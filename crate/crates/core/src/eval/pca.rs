use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Projects `points` onto their top two principal axes.
///
/// Axes are ordered by decreasing variance and signed so that their
/// largest-magnitude component is positive, which makes the output
/// independent of the eigen solver's sign convention.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n == 0 || d < 2 {
        return Err(Error::Degenerate("PCA needs at least one point of dimension 2 or more".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Dimension("points must share one dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = col
                .iter()
                .copied()
                .fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
            if pivot < 0.0 {
                col.iter().map(|v| -v).collect()
            } else {
                col
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |axis: &Vec<f64>| row.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_the_dominant_axis() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                vec![t, 0.1 * (i % 3) as f64, 0.0]
            })
            .collect();
        let proj = pca_2d(&pts).unwrap();
        assert_eq!(proj.len(), 20);
        for (p, q) in pts.iter().zip(&proj) {
            assert!((q[0].abs() - p[0].abs()).abs() < 1e-2);
        }
    }

    #[test]
    fn identical_points_project_to_origin() {
        let pts = vec![vec![0.5, 0.5, 0.5]; 6];
        for p in pca_2d(&pts).unwrap() {
            assert_eq!(p, [0.0, 0.0]);
        }
    }

    #[test]
    fn rejects_empty_input() {
        assert!(pca_2d(&[]).is_err());
    }
}

use aapl_core::eval::silhouette;
use aapl_core::rng::stream;
use rand::Rng;

/// Direct transcription of the definition: for each point, the mean
/// distance to its own cluster and the smallest mean distance to any other.
fn brute_force(points: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..points[i].len() {
            let d = points[i][k] - points[j][k];
            s += d * d;
        }
        s.sqrt()
    };
    let n = points.len();
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort();
    clusters.dedup();
    let mut out = Vec::new();
    for i in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if same.is_empty() {
            out.push(0.0);
            continue;
        }
        let mut a = 0.0;
        for &j in &same {
            a += dist(i, j);
        }
        a /= same.len() as f64;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            if c == labels[i] {
                continue;
            }
            let mut total = 0.0;
            let mut count = 0;
            for j in 0..n {
                if labels[j] == c {
                    total += dist(i, j);
                    count += 1;
                }
            }
            b = b.min(total / count as f64);
        }
        let m = if a > b { a } else { b };
        out.push(if m == 0.0 { 0.0 } else { (b - a) / m });
    }
    out
}

#[test]
fn matches_brute_force_on_random_clouds() {
    for seed in 0..50u64 {
        let mut rng = stream(seed, 77);
        let n = rng.random_range(20..=200);
        let k = rng.random_range(2..=14usize).min(n / 2);
        let dim = rng.random_range(2..=16);
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        // Every cluster gets at least two members.
        let labels: Vec<usize> = (0..n).map(|i| if i < 2 * k { i % k } else { rng.random_range(0..k) }).collect();
        let points: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| centers[l].iter().map(|c| c + rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = silhouette(&points, &labels).unwrap();
        let want = brute_force(&points, &labels);
        // Both sum distances in index order, so agreement is exact.
        assert_eq!(got.per_point, want, "seed {seed}");
        let mean = want.iter().sum::<f64>() / n as f64;
        assert_eq!(got.mean, mean);
    }
}

#[test]
fn hand_computed_six_point_fixture() {
    // Two clusters on a line: {0, 1, 2} and {10, 11, 12}.
    let points: Vec<Vec<f64>> = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0].iter().map(|&x| vec![x]).collect();
    let labels = [0, 0, 0, 1, 1, 1];
    let got = silhouette(&points, &labels).unwrap();
    // x = 0: a = 1.5, b = 11    → 9.5 / 11
    // x = 1: a = 1,   b = 10    → 9 / 10
    // x = 2: a = 1.5, b = 9     → 7.5 / 9
    let expected = [9.5 / 11.0, 0.9, 7.5 / 9.0, 7.5 / 9.0, 0.9, 9.5 / 11.0];
    for (g, e) in got.per_point.iter().zip(expected) {
        assert!((g - e).abs() < 1e-15, "{g} vs {e}");
    }
    let mean = expected.iter().sum::<f64>() / 6.0;
    assert!((got.mean - mean).abs() < 1e-15);
}

//! Seeded Lloyd's k-means with k-means++ init and farthest-point repair for
//! empty clusters.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct KMeansFit {
    pub centroids: Array2<f64>,
    /// Sum of squared distances of every point to its centroid.
    pub objective: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index wins ties).
pub fn nearest(centroids: &Array2<f64>, point: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.rows().into_iter().enumerate() {
        let d = dist2(c.as_slice().unwrap(), point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_plus_plus(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let dim = data.ncols();
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));

    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist2(data.row(i).as_slice().unwrap(), centroids.row(0).as_slice().unwrap()))
        .collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining distances are zero (duplicated data); any point works.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            let d = dist2(data.row(i).as_slice().unwrap(), centroids.row(c).as_slice().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Run k-means to at most `max_iters` Lloyd iterations. The objective is
/// non-increasing across iterations; empty clusters are re-seeded from the
/// point currently farthest from its centroid.
pub fn kmeans(
    data: ArrayView2<f64>,
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> KMeansFit {
    assert!(data.nrows() >= k, "k-means needs at least k points");
    let n = data.nrows();
    let dim = data.ncols();
    let mut centroids = kmeans_plus_plus(data, k, rng);
    let mut assignment = vec![usize::MAX; n];

    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let (a, _) = nearest(&centroids, data.row(i).as_slice().unwrap());
            if assignment[i] != a {
                assignment[i] = a;
                changed = true;
            }
        }

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignment[i];
            counts[a] += 1;
            let mut row = sums.row_mut(a);
            row += &data.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = centroids.row_mut(c);
                row.assign(&(&sums.row(c) / counts[c] as f64));
            }
        }

        // Repair empties: steal the globally farthest point.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = (0usize, -1.0f64);
            for i in 0..n {
                let d = dist2(
                    data.row(i).as_slice().unwrap(),
                    centroids.row(assignment[i]).as_slice().unwrap(),
                );
                if d > far.1 {
                    far = (i, d);
                }
            }
            centroids.row_mut(c).assign(&data.row(far.0));
            counts[assignment[far.0]] -= 1;
            assignment[far.0] = c;
            counts[c] = 1;
            changed = true;
        }

        if !changed {
            break;
        }
    }

    let objective = (0..n)
        .map(|i| nearest(&centroids, data.row(i).as_slice().unwrap()).1)
        .sum();
    KMeansFit { centroids, objective }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn k_equals_one_yields_the_mean() {
        let data = array![[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]];
        let fit = kmeans(data.view(), 1, 10, &mut seeded(3));
        assert_abs_diff_eq!(fit.centroids[(0, 0)], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.centroids[(0, 1)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn distinct_repeated_points_reach_zero_objective() {
        let mut rows = Vec::new();
        for v in 0..4 {
            for _ in 0..5 {
                rows.push([v as f64 * 10.0, -(v as f64)]);
            }
        }
        let data = Array2::from_shape_vec((20, 2), rows.concat().to_vec()).unwrap();
        let fit = kmeans(data.view(), 4, 25, &mut seeded(1));
        assert_abs_diff_eq!(fit.objective, 0.0, epsilon = 1e-18);
    }

    #[test]
    fn deterministic_for_a_fixed_seed() {
        let mut rng = seeded(9);
        let data = Array2::from_shape_fn((60, 3), |_| rng.random_range(-1.0..1.0f64));
        let a = kmeans(data.view(), 8, 25, &mut seeded(4));
        let b = kmeans(data.view(), 8, 25, &mut seeded(4));
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.objective, b.objective);
    }
}

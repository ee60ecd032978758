//! Lloyd's k-means over small contiguous sub-vectors.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    /// `k * dim` values, centroid-major.
    pub centroids: Vec<f32>,
    /// Sum of squared distances to the assigned centroid after each iteration.
    pub objective: Vec<f64>,
    /// Centroids after each iteration. Only filled by [`lloyd_traced`].
    pub snapshots: Vec<Vec<f32>>,
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Runs Lloyd's algorithm on `data` (`n * dim` values) with `k` clusters.
///
/// Initial centroids are `k` distinct training points sampled with `rng`.
/// A cluster that ends an assignment pass empty is re-seeded with the point
/// farthest from the centroid of the currently largest cluster. Stops early
/// once assignments no longer change.
pub fn lloyd(
    data: &[f32],
    dim: usize,
    k: usize,
    iterations: usize,
    rng: &mut impl Rng,
) -> Result<KMeansOutcome> {
    run(data, dim, k, iterations, rng, false)
}

/// Like [`lloyd`] but keeps a copy of the centroids after every iteration.
pub fn lloyd_traced(
    data: &[f32],
    dim: usize,
    k: usize,
    iterations: usize,
    rng: &mut impl Rng,
) -> Result<KMeansOutcome> {
    run(data, dim, k, iterations, rng, true)
}

fn run(
    data: &[f32],
    dim: usize,
    k: usize,
    iterations: usize,
    rng: &mut impl Rng,
    trace: bool,
) -> Result<KMeansOutcome> {
    if dim == 0 || k == 0 {
        return Err(Error::Config("k-means needs dim >= 1 and k >= 1".into()));
    }
    if !data.len().is_multiple_of(dim) {
        return Err(Error::Config(format!(
            "{} values are not a multiple of dim {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if n < k {
        return Err(Error::InsufficientData {
            needed: k,
            available: n,
        });
    }

    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    for i in index::sample(rng, n, k) {
        centroids.extend_from_slice(point(i));
    }

    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0f32; n];
    let mut objective = Vec::with_capacity(iterations);
    let mut snapshots = Vec::new();

    for _ in 0..iterations {
        let mut changed = false;
        for i in 0..n {
            let (j, d) = nearest(point(i), &centroids, dim);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
            dist[i] = d;
        }

        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        let mut reseeded = false;
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let largest = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            let far = (0..n)
                .filter(|&i| assign[i] == largest)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .unwrap();
            assign[far] = empty;
            dist[far] = 0.0;
            counts[largest] -= 1;
            counts[empty] += 1;
            reseeded = true;
        }

        let mut sums = vec![0f64; k * dim];
        for i in 0..n {
            let a = assign[i];
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += x as f64;
            }
        }
        for j in 0..k {
            let c = counts[j] as f64;
            for q in 0..dim {
                centroids[j * dim + q] = (sums[j * dim + q] / c) as f32;
            }
        }

        let obj: f64 = (0..n)
            .map(|i| {
                let a = assign[i];
                sq_dist(point(i), &centroids[a * dim..(a + 1) * dim]) as f64
            })
            .sum();
        objective.push(obj);
        if trace {
            snapshots.push(centroids.clone());
        }
        if !changed && !reseeded {
            break;
        }
    }

    Ok(KMeansOutcome {
        centroids,
        objective,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force objective: each point to its nearest centroid.
    fn oracle_objective(data: &[f32], dim: usize, centroids: &[f32]) -> f64 {
        data.chunks_exact(dim)
            .map(|p| {
                centroids
                    .chunks_exact(dim)
                    .map(|c| {
                        p.iter()
                            .zip(c)
                            .map(|(a, b)| ((a - b) as f64).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }

    #[test]
    fn k_points_k_clusters_is_exact() {
        let data = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = lloyd(&data, 2, 4, 10, &mut rng).unwrap();
        let mut got: Vec<Vec<f32>> = out.centroids.chunks(2).map(|c| c.to_vec()).collect();
        let mut want: Vec<Vec<f32>> = data.chunks(2).map(|c| c.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        assert_eq!(*out.objective.last().unwrap(), 0.0);
    }

    #[test]
    fn objective_non_increasing_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..600 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = lloyd_traced(&data, 4, 16, 25, &mut rng).unwrap();
        let oracle: Vec<f64> = out
            .snapshots
            .iter()
            .map(|c| oracle_objective(&data, 4, c))
            .collect();
        for w in out.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{:?}", out.objective);
        }
        for w in oracle.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{oracle:?}");
        }
        for (o, r) in oracle.iter().zip(&out.objective) {
            assert!(*o <= r * (1.0 + 1e-6));
        }
    }

    #[test]
    fn duplicate_points_trigger_reseed() {
        // Three copies of one point and one outlier: init may pick a
        // duplicate pair, leaving a cluster empty.
        let data = vec![1.0, 1.0, 1.0, 1.0, 9.0, 2.0];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = lloyd(&data, 1, 3, 5, &mut rng).unwrap();
            assert_eq!(*out.objective.last().unwrap(), 0.0, "seed {seed}");
        }
    }

    #[test]
    fn too_few_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            lloyd(&[1.0, 2.0], 1, 3, 5, &mut rng),
            Err(Error::InsufficientData { needed: 3, available: 2 })
        ));
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let centroids = [1.0, -1.0, 1.0];
        assert_eq!(nearest(&[0.0], &centroids, 1).0, 0);
        assert_eq!(nearest(&[0.9], &centroids, 1).0, 0);
        assert_eq!(nearest(&[-2.0], &centroids, 1).0, 1);
    }
}

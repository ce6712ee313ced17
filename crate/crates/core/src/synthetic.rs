//! Synthetic multi-view Gaussian blobs for tests, demos and smoke runs.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::MultiViewDataset;
use crate::error::Result;
use crate::scalar::Scalar;

/// Multi-view Gaussian blobs: every view places the same `n_clusters` centers
/// on an origin-centered regular simplex with unit side length, embedded in
/// its own dimension, and draws isotropic noise with standard deviation
/// `sigma`. Labels are balanced and shuffled; everything is seeded.
///
/// Centering the simplex keeps the origin equidistant from all centers, so a
/// zero-filled missing row carries no spurious cluster evidence.
///
/// Requires `dims[v] >= n_clusters` for every view.
pub fn gaussian_blobs<T: Scalar>(
    n: usize,
    n_clusters: usize,
    dims: &[usize],
    sigma: f64,
    seed: u64,
) -> Result<MultiViewDataset<T>> {
    assert!(n_clusters >= 2, "need at least two clusters");
    assert!(
        dims.iter().all(|&d| d >= n_clusters),
        "every view dimension must be at least the cluster count"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels: Vec<i64> = (0..n).map(|i| (i % n_clusters) as i64).collect();
    labels.shuffle(&mut rng);

    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    // Centers (e_k - 1/C) / sqrt(2): pairwise distance exactly 1, centroid
    // at the origin.
    let scale = 1.0 / 2.0f64.sqrt();
    let offset = 1.0 / n_clusters as f64;

    let mut views = Vec::with_capacity(dims.len());
    let mut names = Vec::with_capacity(dims.len());
    for (v, &d) in dims.iter().enumerate() {
        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            let k = labels[i] as usize;
            for j in 0..d {
                let center = if j < n_clusters {
                    scale * (f64::from(j == k) - offset)
                } else {
                    0.0
                };
                x[[i, j]] = T::of(center + noise.sample(&mut rng));
            }
        }
        views.push(x);
        names.push(format!("v{v}"));
    }
    MultiViewDataset::new(views, names, Some(labels), None, None)
}

/// Random dense features with balanced labels; shaped like a real-world
/// dataset but carrying no structure. Used for format smoke tests.
pub fn random_dataset<T: Scalar>(
    n: usize,
    n_clusters: usize,
    dims: &[usize],
    seed: u64,
) -> Result<MultiViewDataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<i64> = (0..n).map(|i| (i % n_clusters) as i64).collect();
    labels.shuffle(&mut rng);
    let mut views = Vec::with_capacity(dims.len());
    let mut names = Vec::with_capacity(dims.len());
    for (v, &d) in dims.iter().enumerate() {
        views.push(Array2::from_shape_fn((n, d), |_| {
            T::of(rng.gen_range(0.0..1.0))
        }));
        names.push(format!("v{v}"));
    }
    MultiViewDataset::new(views, names, Some(labels), None, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_expected_shape_and_labels() {
        let ds: MultiViewDataset<f64> = gaussian_blobs(30, 3, &[4, 6], 0.1, 7).unwrap();
        assert_eq!(ds.n_samples(), 30);
        assert_eq!(ds.n_views(), 2);
        assert_eq!(ds.view_dims(), vec![4, 6]);
        assert_eq!(ds.n_clusters(), Some(3));
        let labels = ds.labels().unwrap();
        for k in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 10);
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        let a: MultiViewDataset<f64> = gaussian_blobs(12, 2, &[3], 0.2, 1).unwrap();
        let b: MultiViewDataset<f64> = gaussian_blobs(12, 2, &[3], 0.2, 1).unwrap();
        assert_eq!(a.view(0), b.view(0));
        assert_eq!(a.labels(), b.labels());
    }
}

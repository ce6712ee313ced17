//! Training objectives: per-view reconstruction, the graph-weighted
//! contrastive loss and its binary (decoupled / standard) relatives, and the
//! total objective combining them.
//!
//! The contrastive family scores pairs of rows of the cluster indicator by
//! cosine similarity. The weighted form attracts each pair with its fused
//! graph affinity and repels it with the complementary weight; the binary
//! forms threshold affinities at zero into positive and negative sets.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which contrastive objective regularizes the cluster indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    /// Affinity-weighted contrastive loss.
    #[default]
    Wcl,
    /// Decoupled contrastive loss on thresholded affinities.
    Dcl,
    /// Standard InfoNCE-style loss on thresholded affinities.
    Cl,
    /// No contrastive term.
    None,
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the contrastive term in the total objective.
    pub lambda: f64,
    /// Softmax temperature for pair similarities.
    pub tau: f64,
    /// Stabilizer added to contrastive numerators and denominators.
    pub epsilon: f64,
    pub variant: ContrastiveKind,
    /// Include each sample's pair with itself in the contrastive sums.
    /// Off by default: with a zero-diagonal graph the self pair would land in
    /// the repulsion term at full weight.
    pub include_self_pairs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            tau: 1.0,
            epsilon: 1e-12,
            variant: ContrastiveKind::Wcl,
            include_self_pairs: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::InvalidParam(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Evaluate the configured contrastive term and its indicator gradient.
    pub fn contrastive_grad<T: Scalar>(
        &self,
        y: &Array2<T>,
        a_hat: &Array2<T>,
    ) -> Result<(T, Array2<T>)> {
        contrastive_loss_grad(
            self.variant,
            y,
            a_hat,
            T::of(self.tau),
            T::of(self.epsilon),
            self.include_self_pairs,
        )
    }

    /// Combine reconstruction and contrastive terms.
    pub fn total<T: Scalar>(&self, rec: T, zeta: T) -> Result<T> {
        total_loss(rec, zeta, T::of(self.lambda))
    }
}

/// Mean squared reconstruction error over observed rows, summed across views
/// and divided by the global sample count.
pub fn reconstruction_loss<T: Scalar>(
    originals: &[Array2<T>],
    reconstructions: &[Array2<T>],
    n_total: usize,
) -> Result<T> {
    Ok(reconstruction_loss_grad(originals, reconstructions, n_total)?.0)
}

/// Reconstruction loss plus its gradient with respect to each reconstruction.
pub fn reconstruction_loss_grad<T: Scalar>(
    originals: &[Array2<T>],
    reconstructions: &[Array2<T>],
    n_total: usize,
) -> Result<(T, Vec<Array2<T>>)> {
    if originals.len() != reconstructions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} original views vs {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let inv_n = T::one() / T::of(n_total as f64);
    let two = T::one() + T::one();
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(originals.len());
    for (v, (orig, recon)) in originals.iter().zip(reconstructions).enumerate() {
        if orig.dim() != recon.dim() {
            return Err(Error::ShapeMismatch(format!(
                "view {v}: original is {:?}, reconstruction is {:?}",
                orig.dim(),
                recon.dim()
            )));
        }
        let diff = recon - orig;
        value += diff.iter().map(|&d| d * d).sum::<T>() * inv_n;
        grads.push(&diff * (two * inv_n));
    }
    Ok((value, grads))
}

struct Similarity<T> {
    unit: Array2<T>,
    norms: Array1<T>,
    /// `exp(cos(y_i, y_j) / tau)` for every pair.
    kernel: Array2<T>,
}

fn similarity_kernel<T: Scalar>(y: &Array2<T>, tau: T) -> Result<Similarity<T>> {
    let n = y.nrows();
    let mut unit = y.clone();
    let mut norms = Array1::zeros(n);
    for i in 0..n {
        let norm = y.row(i).iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(Error::InvalidParam(format!(
                "row {i} of the indicator has zero norm; cosine similarity is undefined"
            )));
        }
        norms[i] = norm;
        let mut row = unit.row_mut(i);
        row /= norm;
    }
    let mut kernel = unit.dot(&unit.t());
    kernel.mapv_inplace(|g| (g / tau).exp());
    Ok(Similarity {
        unit,
        norms,
        kernel,
    })
}

/// Chain a gradient on the pair kernel back to the indicator rows.
fn kernel_backward<T: Scalar>(sim: &Similarity<T>, d_kernel: &Array2<T>, tau: T) -> Array2<T> {
    // dK/dG = K / tau, entrywise.
    let d_cos = d_kernel * &sim.kernel / tau;
    let d_unit = (&d_cos + &d_cos.t()).dot(&sim.unit);
    let n = sim.unit.nrows();
    let mut d_y = Array2::zeros(sim.unit.dim());
    for i in 0..n {
        let u = sim.unit.row(i);
        let du = d_unit.row(i);
        let along: T = u.iter().zip(du.iter()).map(|(&a, &b)| a * b).sum();
        let inv_norm = T::one() / sim.norms[i];
        let mut out = d_y.row_mut(i);
        for j in 0..u.len() {
            out[j] = (du[j] - u[j] * along) * inv_norm;
        }
    }
    d_y
}

fn validate_graph<T: Scalar>(y: &Array2<T>, a_hat: &Array2<T>) -> Result<()> {
    let n = y.nrows();
    if a_hat.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "graph is {:?} for {n} indicator rows",
            a_hat.dim()
        )));
    }
    for i in 0..n {
        if a_hat[[i, i]] != T::zero() {
            return Err(Error::InvalidParam(format!(
                "graph diagonal entry {i} is non-zero"
            )));
        }
    }
    if a_hat.iter().any(|&a| a < T::zero() || a > T::one()) {
        return Err(Error::InvalidParam(
            "graph affinities must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Affinity-weighted contrastive loss. Each pair pulls with weight `a_ij` and
/// pushes with weight `1 - a_ij`; both sums are stabilized by `eps` so
/// isolated samples stay finite. Self pairs are excluded unless
/// `include_self` is set.
pub fn weighted_contrastive_loss<T: Scalar>(
    y: &Array2<T>,
    a_hat: &Array2<T>,
    tau: T,
    eps: T,
    include_self: bool,
) -> Result<T> {
    Ok(weighted_contrastive_loss_grad(y, a_hat, tau, eps, include_self)?.0)
}

/// Weighted contrastive loss and its gradient with respect to the indicator.
pub fn weighted_contrastive_loss_grad<T: Scalar>(
    y: &Array2<T>,
    a_hat: &Array2<T>,
    tau: T,
    eps: T,
    include_self: bool,
) -> Result<(T, Array2<T>)> {
    validate_graph(y, a_hat)?;
    let n = y.nrows();
    let sim = similarity_kernel(y, tau)?;
    let inv_n = T::one() / T::of(n as f64);
    let mut value = T::zero();
    let mut d_kernel = Array2::zeros((n, n));
    for i in 0..n {
        let mut num = eps;
        let mut den = eps;
        for j in 0..n {
            if j == i && !include_self {
                continue;
            }
            let a = a_hat[[i, j]];
            let k = sim.kernel[[i, j]];
            num += a * k;
            den += (T::one() - a) * k;
        }
        value -= (num / den).ln() * inv_n;
        for j in 0..n {
            if j == i && !include_self {
                continue;
            }
            let a = a_hat[[i, j]];
            d_kernel[[i, j]] -= inv_n * (a / num - (T::one() - a) / den);
        }
    }
    let d_y = kernel_backward(&sim, &d_kernel, tau);
    Ok((value, d_y))
}

/// Contrastive loss on thresholded affinities with the attraction term kept
/// out of the denominator. Positives are pairs with non-zero affinity,
/// negatives pairs with zero affinity; samples lacking either set are
/// dropped and the mean renormalized over the rest.
pub fn decoupled_contrastive_loss<T: Scalar>(
    y: &Array2<T>,
    a_hat: &Array2<T>,
    tau: T,
) -> Result<T> {
    Ok(decoupled_contrastive_loss_grad(y, a_hat, tau)?.0)
}

pub fn decoupled_contrastive_loss_grad<T: Scalar>(
    y: &Array2<T>,
    a_hat: &Array2<T>,
    tau: T,
) -> Result<(T, Array2<T>)> {
    binary_contrastive(y, a_hat, tau, true)
}

/// Standard InfoNCE-style contrastive loss on thresholded affinities:
/// positives in the numerator, positives plus negatives in the denominator.
/// A sample with no positives is dropped; one with no negatives contributes
/// zero naturally.
pub fn standard_contrastive_loss<T: Scalar>(y: &Array2<T>, a_hat: &Array2<T>, tau: T) -> Result<T> {
    Ok(standard_contrastive_loss_grad(y, a_hat, tau)?.0)
}

pub fn standard_contrastive_loss_grad<T: Scalar>(
    y: &Array2<T>,
    a_hat: &Array2<T>,
    tau: T,
) -> Result<(T, Array2<T>)> {
    binary_contrastive(y, a_hat, tau, false)
}

fn binary_contrastive<T: Scalar>(
    y: &Array2<T>,
    a_hat: &Array2<T>,
    tau: T,
    decoupled: bool,
) -> Result<(T, Array2<T>)> {
    validate_graph(y, a_hat)?;
    let n = y.nrows();
    let sim = similarity_kernel(y, tau)?;

    // First pass: sums and the retained-sample count.
    let mut sums = Vec::with_capacity(n);
    let mut kept = 0usize;
    for i in 0..n {
        let mut pos = T::zero();
        let mut neg = T::zero();
        let mut has_pos = false;
        let mut has_neg = false;
        for j in 0..n {
            if j == i {
                continue;
            }
            let k = sim.kernel[[i, j]];
            if a_hat[[i, j]] > T::zero() {
                pos += k;
                has_pos = true;
            } else {
                neg += k;
                has_neg = true;
            }
        }
        // A term is dropped only when its formula is undefined: no positives
        // for either loss, no negatives for the decoupled denominator.
        let usable = has_pos && (!decoupled || has_neg);
        if usable {
            kept += 1;
        }
        sums.push((pos, neg, usable));
    }
    if kept == 0 {
        return Ok((T::zero(), Array2::zeros(y.dim())));
    }

    let inv_kept = T::one() / T::of(kept as f64);
    let mut value = T::zero();
    let mut d_kernel = Array2::zeros((n, n));
    for i in 0..n {
        let (pos, neg, usable) = sums[i];
        if !usable {
            continue;
        }
        let den = if decoupled { neg } else { pos + neg };
        value -= (pos / den).ln() * inv_kept;
        for j in 0..n {
            if j == i {
                continue;
            }
            let is_pos = a_hat[[i, j]] > T::zero();
            let g = if decoupled {
                if is_pos {
                    -inv_kept / pos
                } else {
                    inv_kept / neg
                }
            } else if is_pos {
                -inv_kept * (T::one() / pos - T::one() / den)
            } else {
                inv_kept / den
            };
            d_kernel[[i, j]] += g;
        }
    }
    let d_y = kernel_backward(&sim, &d_kernel, tau);
    Ok((value, d_y))
}

/// Dispatch a contrastive variant; `None` contributes zero with a zero
/// gradient.
pub fn contrastive_loss_grad<T: Scalar>(
    kind: ContrastiveKind,
    y: &Array2<T>,
    a_hat: &Array2<T>,
    tau: T,
    eps: T,
    include_self: bool,
) -> Result<(T, Array2<T>)> {
    match kind {
        ContrastiveKind::Wcl => weighted_contrastive_loss_grad(y, a_hat, tau, eps, include_self),
        ContrastiveKind::Dcl => decoupled_contrastive_loss_grad(y, a_hat, tau),
        ContrastiveKind::Cl => standard_contrastive_loss_grad(y, a_hat, tau),
        ContrastiveKind::None => Ok((T::zero(), Array2::zeros(y.dim()))),
    }
}

/// Total objective: reconstruction plus `lambda` times the contrastive term.
pub fn total_loss<T: Scalar>(rec: T, zeta: T, lambda: T) -> Result<T> {
    let total = rec + lambda * zeta;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "total loss (rec = {rec}, contrastive = {zeta}, lambda = {lambda})"
        )));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-12;

    fn orthogonal_rows(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 })
    }

    fn random_unit_rows(n: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn symmetric_graph(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::from_shape_fn((n, n), |_| rng.gen::<f64>());
        a = (&a + &a.t()) * 0.5;
        for i in 0..n {
            a[[i, i]] = 0.0;
        }
        a
    }

    #[test]
    fn reconstruction_zero_for_perfect_match() {
        let x = random_unit_rows(4, 3, 1);
        let loss = reconstruction_loss(&[x.clone()], &[x], 4).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn reconstruction_hand_case() {
        let orig: Array2<f64> = array![[0.0, 0.0], [0.0, 0.0]];
        let recon = array![[1.0, 0.0], [0.0, 1.0]];
        let loss = reconstruction_loss(&[orig], &[recon], 2).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_is_quadratic() {
        let orig = random_unit_rows(5, 4, 2);
        let recon = random_unit_rows(5, 4, 3);
        let l1 = reconstruction_loss(&[orig.clone()], &[recon.clone()], 5).unwrap();
        let doubled = &orig + &(&recon - &orig) * 2.0;
        let l2 = reconstruction_loss(&[orig], &[doubled], 5).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-10);
    }

    #[test]
    fn reconstruction_gradient_matches_fd() {
        let orig = random_unit_rows(4, 3, 4);
        let recon = random_unit_rows(4, 3, 5);
        let (_, grads) = reconstruction_loss_grad(&[orig.clone()], &[recon.clone()], 4).unwrap();
        let flat: Vec<f64> = recon.iter().copied().collect();
        let fd = central_diff(
            |x| {
                let r = Array2::from_shape_vec((4, 3), x.to_vec()).unwrap();
                reconstruction_loss(&[orig.clone()], &[r], 4).unwrap()
            },
            &flat,
            1e-6,
        );
        let analytic: Vec<f64> = grads[0].iter().copied().collect();
        assert!(max_rel_error(&analytic, &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn weighted_loss_fully_positive_pair() {
        // Two orthogonal samples, affinity one: the repulsion sum is empty
        // and only eps survives in the denominator.
        let y = orthogonal_rows(2);
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let loss = weighted_contrastive_loss(&y, &a, 1.0, EPS, false).unwrap();
        assert!((loss - (-27.631021115928547)).abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn weighted_loss_fully_negative_graph() {
        let y = orthogonal_rows(2);
        let a = Array2::zeros((2, 2));
        let loss = weighted_contrastive_loss(&y, &a, 1.0, EPS, false).unwrap();
        assert!((loss - 27.631021115928547).abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn weighted_loss_is_scale_invariant() {
        let y = random_unit_rows(6, 3, 6);
        let a = symmetric_graph(6, 7);
        let base = weighted_contrastive_loss(&y, &a, 1.0, EPS, false).unwrap();
        let mut scaled = y.clone();
        for (i, factor) in [2.0, 0.5, 7.0, 1.0, 0.1, 3.5].iter().enumerate() {
            let mut row = scaled.row_mut(i);
            row *= *factor;
        }
        let after = weighted_contrastive_loss(&scaled, &a, 1.0, EPS, false).unwrap();
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn weighted_loss_is_permutation_equivariant() {
        let y = random_unit_rows(5, 3, 8);
        let a = symmetric_graph(5, 9);
        let base = weighted_contrastive_loss(&y, &a, 1.0, EPS, false).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut yp = Array2::zeros(y.dim());
        let mut ap = Array2::zeros(a.dim());
        for (to, &from) in perm.iter().enumerate() {
            yp.row_mut(to).assign(&y.row(from));
            for (tc, &fc) in perm.iter().enumerate() {
                ap[[to, tc]] = a[[from, fc]];
            }
        }
        let after = weighted_contrastive_loss(&yp, &ap, 1.0, EPS, false).unwrap();
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn weighted_gradient_matches_fd() {
        let y = random_unit_rows(6, 3, 10);
        let a = symmetric_graph(6, 11);
        let (_, d_y) = weighted_contrastive_loss_grad(&y, &a, 1.0, EPS, false).unwrap();
        let flat: Vec<f64> = y.iter().copied().collect();
        let fd = central_diff(
            |x| {
                let m = Array2::from_shape_vec((6, 3), x.to_vec()).unwrap();
                weighted_contrastive_loss(&m, &a, 1.0, EPS, false).unwrap()
            },
            &flat,
            1e-5,
        );
        let analytic: Vec<f64> = d_y.iter().copied().collect();
        assert!(max_rel_error(&analytic, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn weighted_gradient_with_self_pairs_matches_fd() {
        let y = random_unit_rows(5, 3, 12);
        let a = symmetric_graph(5, 13);
        let (_, d_y) = weighted_contrastive_loss_grad(&y, &a, 0.7, EPS, true).unwrap();
        let flat: Vec<f64> = y.iter().copied().collect();
        let fd = central_diff(
            |x| {
                let m = Array2::from_shape_vec((5, 3), x.to_vec()).unwrap();
                weighted_contrastive_loss(&m, &a, 0.7, EPS, true).unwrap()
            },
            &flat,
            1e-5,
        );
        let analytic: Vec<f64> = d_y.iter().copied().collect();
        assert!(max_rel_error(&analytic, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn binary_graph_makes_weighted_and_decoupled_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for trial in 0..20 {
            let n = 8;
            let y = random_unit_rows(n, 3, 100 + trial);
            // Random symmetric binary graph with at least one positive and
            // one negative per row.
            let mut a = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let partner = (i + 1 + rng.gen_range(0..n - 2)) % n;
                if partner != i {
                    a[[i, partner]] = 1.0;
                    a[[partner, i]] = 1.0;
                }
            }
            for i in 0..n {
                if a.row(i).iter().all(|&x| x == 0.0) {
                    let j = (i + 1) % n;
                    a[[i, j]] = 1.0;
                    a[[j, i]] = 1.0;
                }
            }
            let w = weighted_contrastive_loss(&y, &a, 1.0, EPS, false).unwrap();
            let d = decoupled_contrastive_loss(&y, &a, 1.0).unwrap();
            assert!(
                (w - d).abs() < 1e-9,
                "trial {trial}: weighted {w} vs decoupled {d}"
            );
        }
    }

    #[test]
    fn decoupled_symmetric_case_is_zero() {
        // One positive and one negative at equal similarity.
        let y = orthogonal_rows(3);
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let loss = decoupled_contrastive_loss(&y, &a, 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn decoupled_is_monotone_in_positive_similarity() {
        let mut y = array![[1.0, 0.0], [0.9, 0.1], [-1.0, 0.2]];
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let before = decoupled_contrastive_loss(&y, &a, 1.0).unwrap();
        // Pull the positive pair closer.
        y[[1, 0]] = 1.0;
        y[[1, 1]] = 0.01;
        let after = decoupled_contrastive_loss(&y, &a, 1.0).unwrap();
        assert!(after < before);
    }

    #[test]
    fn decoupled_gradient_matches_fd() {
        let y = random_unit_rows(6, 3, 15);
        let mut a = Array2::<f64>::zeros((6, 6));
        for i in 0..6 {
            a[[i, (i + 1) % 6]] = 1.0;
            a[[(i + 1) % 6, i]] = 1.0;
        }
        let (_, d_y) = decoupled_contrastive_loss_grad(&y, &a, 1.0).unwrap();
        let flat: Vec<f64> = y.iter().copied().collect();
        let fd = central_diff(
            |x| {
                let m = Array2::from_shape_vec((6, 3), x.to_vec()).unwrap();
                decoupled_contrastive_loss(&m, &a, 1.0).unwrap()
            },
            &flat,
            1e-5,
        );
        let analytic: Vec<f64> = d_y.iter().copied().collect();
        assert!(max_rel_error(&analytic, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn standard_loss_without_negatives_is_zero() {
        let y = orthogonal_rows(2);
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let loss = standard_contrastive_loss(&y, &a, 1.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn standard_loss_two_term_hand_case() {
        // Each retained sample sees one positive and one negative at equal
        // similarity: -log(1/2) per term.
        let y = orthogonal_rows(3);
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let loss = standard_contrastive_loss(&y, &a, 1.0).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn standard_loss_positive_when_negatives_exist() {
        let y = random_unit_rows(7, 3, 16);
        let mut a = Array2::<f64>::zeros((7, 7));
        for i in 0..7 {
            a[[i, (i + 1) % 7]] = 1.0;
            a[[(i + 1) % 7, i]] = 1.0;
        }
        let loss = standard_contrastive_loss(&y, &a, 1.0).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn standard_gradient_matches_fd() {
        let y = random_unit_rows(6, 3, 17);
        let mut a = Array2::<f64>::zeros((6, 6));
        for i in 0..6 {
            a[[i, (i + 2) % 6]] = 1.0;
            a[[(i + 2) % 6, i]] = 1.0;
        }
        let (_, d_y) = standard_contrastive_loss_grad(&y, &a, 1.0).unwrap();
        let flat: Vec<f64> = y.iter().copied().collect();
        let fd = central_diff(
            |x| {
                let m = Array2::from_shape_vec((6, 3), x.to_vec()).unwrap();
                standard_contrastive_loss(&m, &a, 1.0).unwrap()
            },
            &flat,
            1e-5,
        );
        let analytic: Vec<f64> = d_y.iter().copied().collect();
        assert!(max_rel_error(&analytic, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn total_loss_combines_linearly() {
        assert_eq!(total_loss(1.5, -2.0, 10.0).unwrap(), -18.5);
        assert_eq!(total_loss(0.7, 123.0, 0.0).unwrap(), 0.7);
        assert!(total_loss(f64::INFINITY, 0.0, 1.0).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weighted_loss_ignores_row_scale(
                seed in 0u64..300,
                scale_millis in 1usize..5000,
            ) {
                let y = random_unit_rows(5, 3, seed);
                let a = symmetric_graph(5, seed + 1);
                let base = weighted_contrastive_loss(&y, &a, 1.0, EPS, false).unwrap();
                let factor = scale_millis as f64 / 1000.0;
                let scaled = &y * factor;
                let after = weighted_contrastive_loss(&scaled, &a, 1.0, EPS, false).unwrap();
                prop_assert!((base - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn losses_reject_nonzero_diagonal() {
        let y = orthogonal_rows(3);
        let mut a = symmetric_graph(3, 18);
        a[[1, 1]] = 0.5;
        assert!(weighted_contrastive_loss(&y, &a, 1.0, EPS, false).is_err());
    }

    #[test]
    fn losses_reject_zero_norm_rows() {
        let mut y = orthogonal_rows(3);
        y.row_mut(2).fill(0.0);
        let a = symmetric_graph(3, 19);
        assert!(weighted_contrastive_loss(&y, &a, 1.0, EPS, false).is_err());
    }
}

//! Central finite-difference helpers for verifying analytic gradients.
//! Deliberately independent of the forward/backward implementations: the
//! checks only see a scalar-valued closure.

use crate::scalar::Scalar;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn central_diff<T: Scalar>(mut f: impl FnMut(&[T]) -> T, x: &[T], step: f64) -> Vec<T> {
    let h = T::of(step);
    let two_h = h + h;
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        grad.push((plus - minus) / two_h);
    }
    grad
}

/// Relative error between two gradient coordinates with an absolute floor for
/// near-zero pairs.
pub fn rel_error<T: Scalar>(a: T, b: T, floor: f64) -> T {
    let scale = a.abs().max(b.abs()).max(T::of(floor));
    (a - b).abs() / scale
}

/// Worst-case relative error over two gradient vectors.
pub fn max_rel_error<T: Scalar>(analytic: &[T], fd: &[T], floor: f64) -> T {
    assert_eq!(analytic.len(), fd.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| rel_error(a, b, floor))
        .fold(T::zero(), |acc, e| acc.max(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2 has gradient 2x.
        let x = vec![0.5f64, -1.25, 2.0];
        let fd = central_diff(|v| v.iter().map(|&a| a * a).sum(), &x, 1e-6);
        let analytic: Vec<f64> = x.iter().map(|&a| 2.0 * a).collect();
        assert!(max_rel_error(&analytic, &fd, 1e-8) < 1e-7);
    }
}

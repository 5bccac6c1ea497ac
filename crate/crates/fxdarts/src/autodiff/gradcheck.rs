//! Central finite-difference gradient checking.
//!
//! Every differentiable operation in this crate is validated against the
//! two-sided quotient `(f(x+h) - f(x-h)) / 2h` in double precision. The
//! checker lives in the library (not test code) so integration tests and
//! the acceptance suite can reuse it.

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-4;

/// Numeric gradient of `f` with respect to every component of `x`.
/// `f` must be a pure function of `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise discrepancy under `|a - n| / max(|a|, |n|, 1)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Checks `|a - n| <= tol * max(|a|, |n|, 1)` for every component.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "{what}: gradient length mismatch"
    );
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1.0);
        let err = (a - n).abs() / denom;
        assert!(
            err <= tol,
            "{what}: gradient mismatch at index {i}: analytic {a}, numeric {n}, rel err {err:.3e} > {tol:.1e}"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![1.0, -2.0, 0.5];
        let numeric = central_diff(f, &x, DEFAULT_H);
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_grad_close(&analytic, &numeric, 1e-8, "quadratic");
    }
}

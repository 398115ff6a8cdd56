//! Finite-difference utilities shared by gradient-checking tests.

/// Central difference of a scalar function at `x0`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, eps: f64) -> f64 {
    (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps)
}

/// Step size scaled to the magnitude of the probed value.
pub fn fd_eps(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Pass rule for comparing analytic vs numeric gradients: relative error
/// against the larger magnitude, with an absolute escape hatch so
/// near-zero gradient pairs are not rejected on finite-difference noise.
pub fn grads_match(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_tol || diff <= rel_tol * analytic.abs().max(numeric.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_square_is_two_x() {
        let d = central_diff(|x| x * x, 3.0, 1e-6);
        assert!((d - 6.0).abs() < 1e-8);
    }

    #[test]
    fn grads_match_accepts_close_and_rejects_far() {
        assert!(grads_match(1.0, 1.00005, 1e-4, 1e-9));
        assert!(!grads_match(1.0, 1.01, 1e-4, 1e-9));
        assert!(grads_match(1e-12, -1e-12, 1e-4, 1e-9));
    }
}

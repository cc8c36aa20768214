//! Central finite-difference verification of hand-written backward passes.

/// Relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic[k]` with `(f(x + eps e_k) - f(x - eps e_k)) / 2 eps`
/// for every coordinate of `x` and returns the largest relative error.
///
/// `f` must be a deterministic scalar function of `x`.
pub fn grad_check<Fn>(x: &[f64], analytic: &[f64], eps: f64, mut f: Fn) -> f64
where
    Fn: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + eps;
        let up = f(&probe);
        probe[k] = orig - eps;
        let down = f(&probe);
        probe[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    worst
}

/// Like [`grad_check`] but the numeric derivative is the Richardson
/// extrapolation `(4 D(eps/2) - D(eps)) / 3` of two central differences.
/// Truncation error drops to O(eps^4), so a larger `eps` can be used and
/// round-off no longer swamps coordinates whose gradient is near zero.
pub fn grad_check_richardson<Fn>(x: &[f64], analytic: &[f64], eps: f64, mut f: Fn) -> f64
where
    Fn: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = probe[k];
        let mut central = |h: f64| {
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        };
        let coarse = central(eps);
        let fine = central(eps / 2.0);
        worst = worst.max(relative_error(analytic[k], (4.0 * fine - coarse) / 3.0));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let x = [0.3, -1.2, 2.0];
        let f = |v: &[f64]| v.iter().map(|a| a * a * a).sum::<f64>();
        let good: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        assert!(grad_check(&x, &good, 1e-5, f) < 1e-8);
        let bad: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        assert!(grad_check(&x, &bad, 1e-5, f) > 0.1);
    }

    #[test]
    fn richardson_is_exact_for_quartics_at_coarse_steps() {
        // fifth derivative is the first one the extrapolation leaves behind
        let x = [0.7, -0.4];
        let f = |v: &[f64]| v.iter().map(|a| a.powi(4) + a * a * a).sum::<f64>();
        let g: Vec<f64> = x.iter().map(|a| 4.0 * a * a * a + 3.0 * a * a).collect();
        assert!(grad_check_richardson(&x, &g, 1e-2, f) < 1e-12);
        assert!(grad_check(&x, &g, 1e-2, f) > 1e-6);
    }
}

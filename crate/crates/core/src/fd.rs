//! Central finite differences for gradient verification.
//!
//! Analytic backward passes in this crate (rasterizer, binding, network
//! layers, the end-to-end perceptual loss) are validated against these
//! estimates. Tests compare with [`max_rel_error`], which ignores entries
//! where both gradients are negligible relative to the largest one — a
//! relative error is meaningless at zero.

/// Central difference df/dx ≈ (f(x+ε) − f(x−ε)) / 2ε for a scalar function
/// of one coordinate, where the caller perturbs shared state in `set`.
pub fn central_diff<F, S>(set: &mut S, mut f: F, x0: f64, eps: f64) -> f64
where
    F: FnMut(&mut S, f64) -> f64,
{
    let hi = f(set, x0 + eps);
    let lo = f(set, x0 - eps);
    // restore
    f(set, x0);
    (hi - lo) / (2.0 * eps)
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
pub fn grad_central<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let hi = f(&xp);
        xp[i] = orig - eps;
        let lo = f(&xp);
        xp[i] = orig;
        g[i] = (hi - lo) / (2.0 * eps);
    }
    g
}

/// Maximum relative error between analytic and finite-difference gradients.
///
/// Entries where `max(|a|, |b|)` falls below `floor_frac` times the largest
/// magnitude in either vector are skipped: both sides agree the entry is
/// (numerically) zero and dividing noise by noise would dominate the result.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor_frac: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = scale * floor_frac;
    let mut worst = 0.0f64;
    for (&a, &b) in analytic.iter().zip(numeric) {
        let mag = a.abs().max(b.abs());
        if mag < floor {
            continue;
        }
        worst = worst.max((a - b).abs() / mag);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let g = grad_central(f, &x, 1e-5);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_error(&expect, &g, 1e-9) < 1e-8);
    }

    #[test]
    fn rel_error_skips_joint_zeros() {
        let a = [1.0, 0.0, 1e-18];
        let b = [1.0, 1e-19, 0.0];
        assert!(max_rel_error(&a, &b, 1e-6) < 1e-12);
    }
}

//! Central finite-difference gradient checks.

use super::tensor::Tensor;

/// Entries whose analytic and numeric gradients are both below this
/// magnitude are compared in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-3;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad<F>(mut f: F, x: &Tensor, h: f64) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = x.values()[i];
            probe.values_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.values_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.values_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Compares `x.grad()` (the analytic gradient) against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` and returns the worst relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let numeric = numeric_grad(f, x, h);
    x.grad()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(values: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::new(&[values.len()], values.to_vec()).unwrap();
        t.accumulate_grad(grad);
        t
    }

    #[test]
    fn linear_is_exact() {
        let w = [0.5, -1.5, 2.0, 3.25];
        let f = |t: &Tensor| t.values().iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
        for h in [1e-2, 1e-4, 0.5] {
            let x = with_grad(&[0.1, 0.2, -0.3, 0.4], &w);
            assert!(finite_diff_check(f, &x, h) < 1e-9);
        }
    }

    #[test]
    fn quadratic_at_small_step() {
        let xv = [0.3, -1.2, 2.5];
        let f = |t: &Tensor| t.values().iter().map(|x| 1.5 * x * x).sum::<f64>();
        let grad: Vec<f64> = xv.iter().map(|x| 3.0 * x).collect();
        let x = with_grad(&xv, &grad);
        assert!(finite_diff_check(f, &x, 1e-4) < 1e-6);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |t: &Tensor| t.values()[0] * t.values()[0];
        let x = with_grad(&[1.0], &[3.0]);
        assert!(finite_diff_check(f, &x, 1e-5) > 0.3);
    }
}

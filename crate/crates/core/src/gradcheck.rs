//! Central finite-difference gradient checking.
//!
//! The checker is deliberately independent of every analytic backward pass in
//! this crate: it only re-evaluates a scalar objective at perturbed inputs.

/// Central difference ∂f/∂x_i ≈ (f(x+h·e_i) − f(x−h·e_i)) / 2h for every
/// coordinate. The buffer is restored after each probe.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let saved = x[i];
        x[i] = saved + step;
        let fp = f(x);
        x[i] = saved - step;
        let fm = f(x);
        x[i] = saved;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Like [`central_diff`] but only for the listed coordinates.
pub fn central_diff_at(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &mut [f64],
    coords: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let saved = x[i];
        x[i] = saved + step;
        let fp = f(x);
        x[i] = saved - step;
        let fm = f(x);
        x[i] = saved;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

/// Relative error |a−n| / max(1, |a|, |n|), the criterion used throughout the
/// gradient test suites.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Largest [`rel_error`] over paired gradient components.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = Σ i·x_i² has gradient 2·i·x_i.
        let mut x = vec![1.0, -2.0, 0.5];
        let mut f = |x: &[f64]| -> f64 {
            x.iter()
                .enumerate()
                .map(|(i, &v)| i as f64 * v * v)
                .sum::<f64>()
        };
        let g = central_diff(&mut f, &mut x, 1e-6);
        let expect = [0.0, -4.0, 2.0];
        assert!(max_rel_error(&expect, &g) < 1e-8);
        assert_eq!(x, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn rel_error_guards_small_magnitudes() {
        assert!(rel_error(0.0, 1e-9) < 1e-8);
        assert!(rel_error(100.0, 101.0) > 9e-3);
    }
}

//! Central finite-difference gradient checking.

/// Numerical gradient of `f` at `x` by central differences.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + step;
            let hi = f(&probe);
            probe[k] = orig - step;
            let lo = f(&probe);
            probe[k] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Largest per-coordinate `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is ~0 from dividing
/// round-off by round-off.
pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > worst.max_rel_error || err.is_nan() {
            worst = GradCheck { max_rel_error: err, worst_index: k, analytic: a, numeric: n };
        }
    }
    worst
}

/// Default step of the gradient checks.
pub const STEP: f64 = 1e-6;
/// Relative-error floor per unit of `max(1, |f(x)|)`.
pub const FLOOR: f64 = 1e-6;

/// Check `analytic` against central differences of `f` at `x`.
///
/// The floor scales with `|f(x)|`, so rescaling `f` does not change the verdict.
pub fn check<F>(mut f: F, analytic: &[f64], x: &[f64]) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let floor = FLOOR * f(x).abs().max(1.0);
    compare(analytic, &central_difference(f, x, STEP), floor)
}

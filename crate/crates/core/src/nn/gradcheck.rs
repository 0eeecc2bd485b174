/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// Relative error per component is `|a - n| / max(|a|, |n|, floor)` where
/// `floor = max(1e-8, 1e-4 * max_i |a_i|)`. Components far below the gradient's
/// scale are thereby compared on that scale, where central differences are
/// limited by roundoff rather than by the analytic value.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let floor = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs())) * 1e-4;
    let floor = floor.max(1e-8);
    let mut probe = x.to_vec();
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: x.len(),
    };
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > worst.max_rel_err || rel.is_nan() {
            worst.max_rel_err = rel;
            worst.worst_index = i;
        }
    }
    worst
}

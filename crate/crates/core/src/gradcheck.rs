//! Central finite differences for checking analytic gradients.

/// Step and tolerance settings for [`check_gradient`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Step as a fraction of `|x_i|`.
    pub rel_step: f64,
    /// Lower bound on the step for coordinates near zero.
    pub min_step: f64,
    /// Components smaller than `floor_frac * max|analytic|` are compared
    /// against that floor instead of their own magnitude.
    pub floor_frac: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            rel_step: 1e-4,
            min_step: 1e-7,
            floor_frac: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, if any were checked.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// `(f(x + h e_i) - f(x - h e_i)) / (x_i+ - x_i-)`, using the steps that
/// were actually representable.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    let plus = x[i] + h;
    let minus = x[i] - h;
    probe[i] = plus;
    let fp = f(&probe);
    probe[i] = minus;
    let fm = f(&probe);
    (fp - fm) / (plus - minus)
}

/// Compares `analytic` against central differences of `f` at `x`.
/// Coordinates with `skip[i]` set are not evaluated.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    skip: Option<&[bool]>,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (cfg.floor_frac * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    for i in 0..x.len() {
        if skip.is_some_and(|s| s[i]) {
            report.skipped += 1;
            continue;
        }
        let h = (x[i].abs() * cfg.rel_step).max(cfg.min_step);
        let numeric = central_difference(&mut f, x, i, h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let err = (a - numeric).abs() / denom;
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report
}

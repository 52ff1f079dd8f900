//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate every analytic backward pass. The
//! checker perturbs a flat parameter vector one coordinate at a time, so
//! callers expose their computation as `f(&[f64]) -> f64`.

#[derive(Debug, Clone, Copy)]
pub struct GradCheckCfg {
    /// Base step; the effective step scales with the coordinate magnitude.
    pub step: f64,
    /// Floor for the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

/// Central difference of `f` along coordinate `i` at point `x`.
pub fn central_diff<F>(f: &F, x: &[f64], i: usize, step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let h = step * (1.0 + x[i].abs());
    xp[i] = x[i] + h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare `analytic` to central differences on every coordinate; returns the
/// max relative error.
pub fn check_fn_grad<F>(f: &F, x: &[f64], analytic: &[f64], cfg: &GradCheckCfg) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let numeric = central_diff(f, x, i, cfg.step);
        worst = worst.max(rel_err(analytic[i], numeric, cfg.floor));
    }
    worst
}

/// Same as [`check_fn_grad`] but only on the given coordinates, for large
/// parameter vectors where exhaustive differencing is too slow.
pub fn check_fn_grad_at<F>(
    f: &F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    cfg: &GradCheckCfg,
) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = central_diff(f, x, i, cfg.step);
        worst = worst.max(rel_err(analytic[i], numeric, cfg.floor));
    }
    worst
}

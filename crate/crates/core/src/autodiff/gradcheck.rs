//! Central finite-difference verification of analytic gradients.

use std::sync::Arc;

use rand::seq::index;
use serde::Serialize;

use super::array::Array;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries checked per parameter array; arrays smaller than this are checked in full.
    pub samples_per_array: usize,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`.
    /// The floor is raised per entry to `1e4 * eps * |loss| / step`: rounding in the
    /// loss alone perturbs a central difference by about `eps * |loss| / step`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_array: 24,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter index and flat element index of the worst entry.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Entries whose step straddled a kink and were re-measured with a smaller step.
    pub refined: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic[k]` against central differences of `loss` around `params`.
pub fn check_gradients(
    params: &[Arc<Array>],
    analytic: &[Option<Array>],
    loss: impl Fn(&[Arc<Array>]) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::Shape(
            "gradient list does not match parameters".into(),
        ));
    }
    let mut rng = seeded(cfg.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        refined: 0,
    };
    let base = loss(params)?;
    let mut work: Vec<Arc<Array>> = params.to_vec();
    for (k, p) in params.iter().enumerate() {
        let len = p.len();
        let picks: Vec<usize> = if len <= cfg.samples_per_array {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut rng, len, cfg.samples_per_array).into_vec();
            v.sort_unstable();
            v
        };
        for e in picks {
            let original = p.data()[e];
            let mut eval = |x: f64| -> Result<f64> {
                let mut a = (**p).clone();
                a.data_mut()[e] = x;
                work[k] = Arc::new(a);
                loss(&work)
            };
            // One-sided slopes that disagree mean a kink (e.g. SELU at 0)
            // lies within the step; shrink it until they agree.
            let floor = |step: f64| cfg.floor.max(1e4 * f64::EPSILON * base.abs() / step);
            let mut step = cfg.step;
            let numeric = loop {
                let plus = eval(original + step)?;
                let minus = eval(original - step)?;
                let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
                let kink = relative_error(fwd, bwd, floor(step)) > 1e-3;
                if !kink || step <= cfg.step * 1e-3 {
                    break (plus - minus) / (2.0 * step);
                }
                if step == cfg.step {
                    report.refined += 1;
                }
                step /= 10.0;
            };
            work[k] = Arc::clone(p);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[e]);
            let err = relative_error(a, numeric, floor(step));
            if !err.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at param {k} entry {e}"
                )));
            }
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (k, e);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

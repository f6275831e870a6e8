//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::{Grads, NodeId, ParamStore, Tape};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn eval<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape)?;
    Ok(tape.value(out).data().iter().sum())
}

/// Builds the scalar loss with `f`, differentiates it on the tape, and
/// compares every parameter entry (or the first `max_per_param` of each)
/// against central differences.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    f: F,
    tolerance: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    check_gradients(params, &analytic, f, tolerance, max_per_param)
}

/// Compares supplied gradients against central differences of `f`.
/// Exposed separately so a corrupted gradient can be fed in as a control.
pub fn check_gradients<F>(
    params: &ParamStore,
    analytic: &Grads,
    f: F,
    tolerance: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.get(id).len();
        let limit = max_per_param.map_or(n, |m| m.min(n));
        // spread the checked entries over the whole tensor
        let stride = (n / limit.max(1)).max(1);
        let mut worst = 0.0f64;
        let mut checked = 0;
        for j in (0..n).step_by(stride).take(limit) {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + DEFAULT_STEP;
            let plus = eval(&work, &f)?;
            work.get_mut(id).data_mut()[j] = orig - DEFAULT_STEP;
            let minus = eval(&work, &f)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: worst,
            checked,
        });
    }
    let passed = report.iter().all(|p| p.max_rel_error <= tolerance);
    Ok(GradCheckReport {
        params: report,
        tolerance,
        passed,
    })
}

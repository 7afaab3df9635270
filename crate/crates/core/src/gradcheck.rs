//! Central finite-difference checks of tape gradients.

use ndarray::Array2;

use crate::error::Result;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Var;

/// Worst disagreement found for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

/// Magnitude below which both gradients count as zero when forming the
/// relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of the scalar produced by `loss` with
/// `(f(x+h) - f(x-h)) / 2h` for up to `max_entries` evenly spaced entries
/// of each named tensor.
pub fn check<F>(
    params: &ParamStore<f64>,
    names: &[&str],
    step: f64,
    max_entries: usize,
    loss: F,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut ctx = Ctx::new(params);
        let out = loss(&mut ctx)?;
        ctx.tape.backward(out).into_params()
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(store);
        let out = loss(&mut ctx)?;
        Ok(ctx.tape.value(out)[[0, 0]])
    };
    let mut work = params.clone();
    let mut reports = Vec::with_capacity(names.len());
    for &name in names {
        let shape = params.value(name)?.dim();
        let zero = Array2::zeros(shape);
        let grad = analytic.get(name).unwrap_or(&zero);
        let n = shape.0 * shape.1;
        let stride = (n / max_entries.max(1)).max(1);
        let mut report = GradCheck {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for flat in (0..n).step_by(stride).take(max_entries) {
            let idx = (flat / shape.1, flat % shape.1);
            let orig = params.value(name)?[idx];
            work.get_mut(name)?.value[idx] = orig + step;
            let up = eval(&work)?;
            work.get_mut(name)?.value[idx] = orig - step;
            let down = eval(&work)?;
            work.get_mut(name)?.value[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad[idx];
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
        }
        reports.push(report);
    }
    Ok(reports)
}

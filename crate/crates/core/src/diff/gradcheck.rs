use std::collections::BTreeMap;

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Evaluates `f` on a fresh tape and returns its value and the gradient of
/// every parameter.
pub fn value_and_grad<F>(f: &F, params: &ParamSet) -> Result<(f64, BTreeMap<String, Tensor2>)>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective value {value}")));
    }
    let grads = tape.backward(out);
    let mut map = BTreeMap::new();
    for (name, var) in bound.iter() {
        let p = params.require(name)?;
        map.insert(name.clone(), grads.get_or_zeros(*var, p.rows(), p.cols()));
    }
    Ok((value, map))
}

fn eval<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective value {v}")));
    }
    Ok(v)
}

/// Worst relative disagreement between the tape's adjoints and central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, over every scalar parameter.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let (_, analytic) = value_and_grad(&f, params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for (name, grad) in &analytic {
        for k in 0..grad.len() {
            let orig = probe.require(name)?.data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + eps;
            let fp = eval(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig - eps;
            let fm = eval(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

//! Central finite-difference gradient checking.
//!
//! Relative error is `|analytic - numeric| / max(1, |analytic|)`.

use super::params::{ParamId, ParamStore, Session};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input or parameter name, flat index) of the worst element.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((label.to_string(), idx));
        }
    }
}

/// Checks d f / d inputs, where `f` maps leaf variables to a scalar.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(&format!("input{i}"), j, analytic[i].data()[j], numeric);
        }
    }
    Ok(report)
}

/// Checks d f / d parameters. `stride` > 1 samples every `stride`-th element
/// of each parameter to bound cost on larger models.
pub fn check_params<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    h: f64,
    stride: usize,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Session<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let s = Session::new(&tape, store);
        let loss = f(&s)?;
        s.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let s = Session::new(&tape, store);
        Ok(f(&s)?.value().item())
    };
    let mut report = GradCheckReport::default();
    for &id in params {
        let n = store.get(id).numel();
        let name = store.param(id).name.clone();
        for j in (0..n).step_by(stride.max(1)) {
            let orig = store.get(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map(|g| g.data()[j]).unwrap_or(0.0);
            report.record(&name, j, a, numeric);
        }
    }
    Ok(report)
}

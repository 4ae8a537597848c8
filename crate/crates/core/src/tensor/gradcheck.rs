//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error: near-zero gradients are
/// compared on an absolute scale of `tol * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol && self.max_rel_error.is_finite()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients against central differences of `value`.
pub fn check_gradients(
    value: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    tol: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tol };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = value(&probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = value(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_error(grad.data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Builds `f` on a fresh float64 graph with every input as a variable and
/// checks its reverse-mode gradients against finite differences.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let y = g.value(out).item();
        if !with_grad {
            return Ok((y, Vec::new()));
        }
        g.backward(out)?;
        let grads = vars
            .iter()
            .zip(ts)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((y, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    check_gradients(|ts| eval(ts, false).map(|(y, _)| y), inputs, &analytic, tol)
}

/// Like [`grad_check`], but also differentiates through every tensor of a
/// parameter store; `f` must bind parameters from the store it is given.
pub fn grad_check_params<Fun>(
    f: Fun,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    tol: f64,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    g.backward(out)?;
    let mut analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    for (grad, (_, _, t)) in g.param_grads(store).into_iter().zip(store.iter()) {
        analytic.push(grad.unwrap_or_else(|| Tensor::zeros(t.shape())));
    }
    let mut all: Vec<Tensor<f64>> = inputs.to_vec();
    all.extend(store.iter().map(|(_, _, t)| t.clone()));
    let value = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut s = store.clone();
        for (id, t) in store.ids().zip(&ts[n_in..]) {
            *s.get_mut(id) = t.clone();
        }
        let mut g = Graph::inference();
        let vars: Vec<Var> = ts[..n_in].iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &s, &vars)?;
        Ok(g.value(out).item())
    };
    check_gradients(value, &all, &analytic, tol)
}

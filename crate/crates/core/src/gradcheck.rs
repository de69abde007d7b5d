//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Parameter};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn merge(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        self.checked += 1;
    }
}

fn scalar(graph: &Graph<'_>, v: Var) -> Result<f64> {
    let t = graph.value(v);
    if t.numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar function, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Checks `f` against central differences with respect to every element of
/// every input and returns the largest relative error.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::default();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.input(t.clone(), true)).collect();
    let out = f(&mut graph, &vars)?;
    let grads = graph.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::default();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec);
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            report.merge(a, numeric);
        }
    }
    Ok(report.max_rel_error)
}

/// Checks the gradient of a scalar loss built from `store`'s parameters.
/// Only parameters accepted by `select` are perturbed.
pub fn grad_check_params<S, F>(store: &ParamStore, select: S, f: F) -> Result<GradCheckReport>
where
    S: Fn(&Parameter) -> bool,
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic: Vec<(usize, Vec<f64>)> = {
        let mut graph = Graph::new(store.as_slice()).with_all_param_grads();
        let out = f(&mut graph)?;
        let grads = graph.backward(out)?;
        grads.into_param_grads(&graph)
    };
    let analytic_for = |id: usize| analytic.iter().find(|(i, _)| *i == id).map(|(_, g)| g);

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for id in 0..store.len() {
        if !select(store.get(id)) {
            continue;
        }
        let grad = analytic_for(id);
        for i in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data()[i];
            let eval = |x: f64, work: &mut ParamStore| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = x;
                let mut g = Graph::new(work.as_slice());
                let out = f(&mut g)?;
                scalar(&g, out)
            };
            let plus = eval(orig + FD_STEP, &mut work)?;
            let minus = eval(orig - FD_STEP, &mut work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.merge(grad.map_or(0.0, |g| g[i]), numeric);
        }
    }
    Ok(report)
}

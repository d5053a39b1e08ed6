//! Central finite-difference comparison for 64-bit graphs.

use crate::graph::{Graph, Var};
use crate::layers::{Param, ParamId};
use crate::tensor::Tensor;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-12)`.
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.relative_error < tolerance
    }

    /// Both gradients vanish up to `abs_tol` (e.g. a bias feeding a
    /// training-mode batch norm, whose exact gradient is zero and whose
    /// relative error is therefore meaningless).
    pub fn vanishes(&self, abs_tol: f64) -> bool {
        self.analytic_norm < abs_tol && self.numeric_norm < abs_tol
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    diff / (norm(analytic) + norm(numeric)).max(1e-12)
}

/// Evenly spread element indices, at most `max` of them.
fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Checks the gradient of a scalar function of free input tensors.
///
/// `f` builds the loss on a fresh graph from the given input variables.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, max_per_tensor: usize, f: F) -> Vec<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    let mut out = Vec::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic_all = grads.wrt(*v).unwrap_or(&zeros);
        let idx = sample_indices(inputs[k].len(), max_per_tensor);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(analytic_all.data()[i]);
        }
        out.push(GradCheck { name: format!("input{k}"), checked: idx.len(), relative_error: relative_error(&analytic, &numeric), analytic_norm: norm(&analytic), numeric_norm: norm(&numeric) });
    }
    out
}

/// Checks the gradient of a scalar loss with respect to parameters.
///
/// `loss` evaluates the model (reading the current parameter values) on a
/// caller-supplied graph; `params` yields the parameters to perturb, in the
/// same order every call. Models must be deterministic between calls
/// (batch-norm running statistics are not read in training mode).
pub fn check_params<M, L, P>(model: &mut M, step: f64, max_per_tensor: usize, loss: L, params: P) -> Vec<GradCheck>
where
    L: for<'a> Fn(&'a M, &mut Graph<'a, f64>) -> Var,
    P: Fn(&mut M) -> Vec<(String, &mut Param<f64>)>,
{
    let ids: Vec<(String, ParamId, usize)> =
        params(model).into_iter().map(|(n, p)| (n, p.id(), p.numel())).collect();
    let analytic_all: Vec<(String, Vec<f64>)> = {
        let mut g = Graph::new();
        let l = loss(model, &mut g);
        let grads = g.backward(l);
        ids.into_iter()
            .map(|(n, id, len)| {
                let g = grads.param_by_id(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
                (n, g)
            })
            .collect()
    };
    let eval = |m: &M| -> f64 {
        let mut g = Graph::no_grad();
        let l = loss(m, &mut g);
        g.value(l).item()
    };
    let count = analytic_all.len();
    let mut out = Vec::with_capacity(count);
    for (k, (name, analytic_full)) in analytic_all.into_iter().enumerate() {
        let len = analytic_full.len();
        let idx = sample_indices(len, max_per_tensor);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = params(model)[k].1.value.data()[i];
            params(model)[k].1.value.data_mut()[i] = orig + step;
            let plus = eval(model);
            params(model)[k].1.value.data_mut()[i] = orig - step;
            let minus = eval(model);
            params(model)[k].1.value.data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(analytic_full[i]);
        }
        out.push(GradCheck { name, checked: idx.len(), relative_error: relative_error(&analytic, &numeric), analytic_norm: norm(&analytic), numeric_norm: norm(&numeric) });
    }
    out
}

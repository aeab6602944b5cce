//! Central finite-difference checks against the tape's gradients.

use ndarray::Array2;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Denominator floor so near-zero gradients are compared absolutely.
const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheck {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), index));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// Compares `∂f/∂θ` for the listed parameters (all when `ids` is empty).
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss);
    let analytic: Vec<(ParamId, Array2<f64>)> = ids
        .iter()
        .map(|&id| {
            let bound = g.bound_params().find(|(p, _)| *p == id).map(|(_, v)| v);
            let grad = bound
                .and_then(|v| grads.get(v))
                .map(|g| g.as_standard_layout().into_owned())
                .unwrap_or_else(|| Array2::zeros(store.value(id).dim()));
            (id, grad)
        })
        .collect();

    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = f(&mut g, store);
        g.scalar(l)
    };
    let mut report = GradCheck::default();
    for (id, grad) in analytic {
        let name = store.name(id).to_string();
        for k in 0..grad.len() {
            let original = store.value(id).as_slice().expect("standard layout")[k];
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = original + eps;
            let plus = eval(store);
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = original - eps;
            let minus = eval(store);
            store.value_mut(id).as_slice_mut().expect("standard layout")[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(&name, k, grad.as_slice().expect("standard layout")[k], numeric);
        }
    }
    report
}

/// Compares `∂f/∂x` for a free input matrix.
pub fn check_input<F>(x: &Array2<f64>, eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv);
    let grads = g.backward(loss);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
    let eval = |x: Array2<f64>| {
        let mut g = Graph::new();
        let xv = g.input(x);
        let l = f(&mut g, xv);
        g.scalar(l)
    };
    let mut report = GradCheck::default();
    for (k, a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.as_slice_mut().expect("standard layout")[k] += eps;
        let mut minus = x.clone();
        minus.as_slice_mut().expect("standard layout")[k] -= eps;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
        report.record("input", k, *a, numeric);
    }
    report
}

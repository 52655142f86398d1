//! Central finite-difference checks against reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_err(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compare `d loss / d param[index]` from autodiff with a central
/// difference of step `eps`. `loss` must build a scalar from scratch on
/// the graph it is handed and be deterministic.
pub fn check_param<F>(store: &ParamStore, name: &str, indices: &[usize], eps: f64, loss: F) -> Vec<GradSample>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Var,
{
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = loss(&mut g);
        g.value(l).item()
    };
    let mut g = Graph::new(store);
    let l = loss(&mut g);
    let grads = g.backward(l);
    let shape = store
        .get(name)
        .unwrap_or_else(|| panic!("unknown parameter {name}"))
        .shape()
        .to_vec();
    let zero = crate::tensor::Tensor::zeros(&shape);
    let analytic = grads.param(name).unwrap_or(&zero);
    indices
        .iter()
        .map(|&i| {
            let mut s = store.clone();
            s.get_mut(name).unwrap().data_mut()[i] += eps;
            let up = eval(&s);
            s.get_mut(name).unwrap().data_mut()[i] -= 2.0 * eps;
            let down = eval(&s);
            GradSample {
                name: name.to_string(),
                index: i,
                analytic: analytic.data()[i],
                numeric: (up - down) / (2.0 * eps),
            }
        })
        .collect()
}

/// Worst relative error of [`check_param`] over several parameters.
pub fn worst_rel_err<F>(store: &ParamStore, names: &[&str], per_param: usize, eps: f64, floor: f64, loss: F) -> (f64, Vec<GradSample>)
where
    F: for<'a> Fn(&mut Graph<'a>) -> Var,
{
    let mut all = Vec::new();
    for name in names {
        let n = store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).numel();
        let step = (n / per_param.max(1)).max(1);
        let idx: Vec<usize> = (0..n).step_by(step).take(per_param).collect();
        all.extend(check_param(store, name, &idx, eps, &loss));
    }
    let worst = all.iter().map(|s| s.rel_err(floor)).fold(0.0, f64::max);
    (worst, all)
}

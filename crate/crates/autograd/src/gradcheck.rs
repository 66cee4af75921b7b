use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Below this magnitude a gradient element is compared absolutely: central
/// differences of an O(1) loss carry round-off near 1e-10, so a true zero
/// would otherwise never match.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|ad - fd| / max(|ad| + |fd|, GRAD_FLOOR)`.
pub fn rel_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(GRAD_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences and returns the largest [`rel_error`] over every input
/// element.
///
/// `f` is rebuilt on a fresh inference-mode graph for every evaluation.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new(0);
        let vars = values
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + eps;
            let (gp, _, op) = eval(&work)?;
            let plus = gp.value(op).data()[0];
            work[ti].data_mut()[e] = orig - eps;
            let (gm, _, om) = eval(&work)?;
            let minus = gm.value(om).data()[0];
            work[ti].data_mut()[e] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[ti].data()[e];
            worst = worst.max(rel_error(ad, fd));
        }
    }
    Ok(worst)
}

/// Same comparison as [`grad_check`] but with respect to every tensor in a
/// parameter store. `f` builds the scalar loss from the store, which is
/// perturbed in place and restored afterwards.
pub fn grad_check_params<F>(f: F, store: &mut ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(0);
        let out = f(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new(0);
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = match grads.param(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(store.get(id).rows(), store.get(id).cols()),
        };
        for e in 0..store.get(id).len() {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[e] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic.data()[e];
            worst = worst.max(rel_error(ad, fd));
        }
    }
    Ok(worst)
}

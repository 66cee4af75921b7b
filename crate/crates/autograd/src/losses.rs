use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// `lambda · Σ|θ|` over the listed parameters.
pub fn l1_penalty(
    g: &mut Graph,
    store: &ParamStore,
    params: &[ParamId],
    lambda: f64,
) -> Result<Option<Var>> {
    penalty(g, store, params, lambda, Graph::sum_abs)
}

/// `lambda · Σθ²` over the listed parameters.
pub fn l2_penalty(
    g: &mut Graph,
    store: &ParamStore,
    params: &[ParamId],
    lambda: f64,
) -> Result<Option<Var>> {
    penalty(g, store, params, lambda, Graph::sum_squares)
}

fn penalty(
    g: &mut Graph,
    store: &ParamStore,
    params: &[ParamId],
    lambda: f64,
    reduce: fn(&mut Graph, Var) -> Result<Var>,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &id in params {
        let p = g.param(store, id)?;
        let r = reduce(g, p)?;
        total = Some(match total {
            Some(t) => g.add(t, r)?,
            None => r,
        });
    }
    total.map(|t| g.scale(t, lambda)).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ParamKind, Tensor};

    #[test]
    fn l2_of_single_weight() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Weight, Tensor::scalar(2.0));
        let mut g = Graph::new(0);
        let p = l2_penalty(&mut g, &store, &[id], 0.01).unwrap().unwrap();
        assert!((g.value(p).data()[0] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn l2_of_two_weights() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Weight, Tensor::row(vec![2.0, -1.0]));
        let mut g = Graph::new(0);
        let p = l2_penalty(&mut g, &store, &[id], 0.01).unwrap().unwrap();
        assert!((g.value(p).data()[0] - 0.05).abs() < 1e-15);
        let p1 = l1_penalty(&mut g, &store, &[id], 0.01).unwrap().unwrap();
        assert!((g.value(p1).data()[0] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn no_params_no_penalty() {
        let store = ParamStore::new();
        let mut g = Graph::new(0);
        assert!(l1_penalty(&mut g, &store, &[], 0.01).unwrap().is_none());
    }
}

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD or bias-corrected Adam over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update for every parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        for (id, g) in grads.params() {
            let theta = store.get_mut(*id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (t, gv) in theta.data_mut().iter_mut().zip(g.data()) {
                        *t -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let idx = id.index();
                    let (r, c) = (g.rows(), g.cols());
                    let m = self.first[idx].get_or_insert_with(|| Tensor::zeros(r, c));
                    let v = self.second[idx].get_or_insert_with(|| Tensor::zeros(r, c));
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (i, (t, &gv)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
                        md[i] = beta1 * md[i] + (1.0 - beta1) * gv;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gv * gv;
                        let mhat = md[i] / bc1;
                        let vhat = vd[i] / bc2;
                        *t -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

//! Layer helpers shared by the models.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Fully connected layer `x · W + b`, `W: [inputs, outputs]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w: Vec<f64> = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::from_matrix(inputs, outputs, w).expect("weight shape"),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::zeros(1, outputs),
        );
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    /// Plain-tensor forward pass without recording a graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.matmul(store.get(self.weight))?;
        let b = store.get(self.bias).data();
        let c = h.cols();
        for row in h.data_mut().chunks_mut(c.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(h)
    }
}

/// Stack of [`Linear`] layers, each followed by its activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Self {
        assert_eq!(widths.len(), activations.len() + 1);
        let layers = widths
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &act))| {
                (
                    Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng),
                    act,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].0.inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty mlp").0.outputs
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for (layer, act) in &self.layers {
            x = layer.forward(g, store, x)?;
            x = act.apply(g, x)?;
        }
        Ok(x)
    }

    /// Inference pass on a plain tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (layer, act) in &self.layers {
            h = layer.apply(store, &h)?;
            h = match act {
                Activation::Identity => h,
                Activation::Relu => h.map(|v| v.max(0.0)),
                Activation::Gelu => h.map(crate::graph::gelu),
                Activation::Sigmoid => h.map(crate::graph::sigmoid),
            };
        }
        Ok(h)
    }
}

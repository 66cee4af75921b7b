//! Define-by-run computation graph.
//!
//! A [`Graph`] records every op as it executes and keeps the forward value of
//! each node. [`Graph::backward`] walks the tape in reverse and returns fresh
//! gradients every call, so nothing accumulates between calls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutogradError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Clamp applied to probabilities entering binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;
/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which sign convention the cosine triplet hinge uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TripletSemantics {
    /// `max(cos(a,n) - cos(a,p) + margin, 0)`: pulls positives in.
    #[default]
    Corrected,
    /// `max(cos(a,p) - cos(a,n) + margin, 0)`, the sign order as printed.
    Literal,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumAbs(Var),
    SumSquares(Var),
    Bce {
        pred: Var,
        target: Tensor,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Triplet {
        a: Var,
        p: Var,
        n: Var,
        margin: f64,
        semantics: TripletSemantics,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    rng: ChaCha8Rng,
    training: bool,
}

/// Result of one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node; zeros when the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.nodes[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// One gradient per parameter placed on the graph, in insertion order.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            training: false,
        }
    }

    /// Graph whose dropout ops are active.
    pub fn training(seed: u64) -> Self {
        let mut g = Self::new(seed);
        g.training = true;
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        let (r, c) = t.dims()?;
        let t = t.reshape(vec![r, c])?;
        self.push(t, Op::Leaf, "input")
    }

    /// Places a parameter on the tape; its gradient is reported by
    /// [`Gradients::params`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&(v, _)) = self.params.iter().find(|(_, p)| *p == id) {
            return Ok(v);
        }
        let v = self.input(store.get(id).clone())?;
        self.params.push((v, id));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push(
            Tensor::from_matrix(m, n, out)?,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            "matmul",
        )
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(mismatch("matmul_t", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        self.push(
            Tensor::from_matrix(m, n, out)?,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            "matmul_t",
        )
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(
        &self,
        x: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (r, c) = (tx.rows(), tx.cols());
        if tr.rows() != 1 || tr.cols() != c {
            return Err(mismatch(name, tx, tr));
        }
        let rv = tr.data();
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = f(out[i * c + j], rv[j]);
            }
        }
        Tensor::from_matrix(r, c, out)
    }

    /// `x + row` with `row` of shape `[1, cols]` broadcast over every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        self.push(t, Op::AddRow(x, row), "add_row")
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        self.push(t, Op::MulRow(x, row), "mul_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), "relu")
    }

    /// Exact GELU, `x·Φ(x)` with Φ the standard normal CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x), "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), "sigmoid")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let t = Tensor::from_matrix(r, c, out)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// Row-wise normalisation to zero mean and unit (population) variance,
    /// without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.chunks_mut(c.max(1)).take(r) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::from_matrix(r, c, out)?;
        self.push(t, Op::LayerNorm { x, inv_std }, "layer_norm")
    }

    /// Inverted dropout: in training mode each unit is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in inference
    /// mode the op is the identity.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutogradError::InvalidProbability(p));
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = if self.training && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            (0..n)
                .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n]
        };
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::Dropout { x, mask }, "dropout")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::from_matrix(rows, c, data)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let t = Tensor::from_matrix(r, total, data)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(AutogradError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::from_matrix(len, c, data)?;
        self.push(t, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(AutogradError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row_slice(i)[start..start + len]);
        }
        let t = Tensor::from_matrix(r, len, data)?;
        self.push(t, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Row lookup, `out[i] = table[indices[i]]`; gradients scatter-add.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, _) = self.dims(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(AutogradError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let t = self.value(table).select_rows(indices);
        self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x), "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.sum() / tx.len().max(1) as f64);
        self.push(t, Op::Mean(x), "mean")
    }

    pub fn sum_abs(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum_abs());
        self.push(t, Op::SumAbs(x), "sum_abs")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum_squares());
        self.push(t, Op::SumSquares(x), "sum_squares")
    }

    /// Binary cross-entropy, summed over columns and averaged over rows.
    /// Predictions are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.rows() != target.rows() || tp.cols() != target.cols() {
            return Err(mismatch("bce", tp, target));
        }
        let rows = tp.rows().max(1) as f64;
        let total: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let target = target.clone().reshape(vec![tp.rows(), tp.cols()])?;
        self.push(
            Tensor::scalar(total / rows),
            Op::Bce { pred, target },
            "bce",
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mse", |x, y| (x - y) * (x - y))?;
        let value = t.sum() / t.len().max(1) as f64;
        self.push(Tensor::scalar(value), Op::Mse { a, b }, "mse")
    }

    /// Mean cosine triplet hinge over matching rows of `a`, `p`, `n`.
    pub fn triplet_cosine(
        &mut self,
        a: Var,
        p: Var,
        n: Var,
        margin: f64,
        semantics: TripletSemantics,
    ) -> Result<Var> {
        let (ta, tp, tn) = (self.value(a), self.value(p), self.value(n));
        if ta.shape() != tp.shape() {
            return Err(mismatch("triplet_cosine", ta, tp));
        }
        if ta.shape() != tn.shape() {
            return Err(mismatch("triplet_cosine", ta, tn));
        }
        let rows = ta.rows();
        let mut total = 0.0;
        for i in 0..rows {
            let (ra, rp, rn) = (ta.row_slice(i), tp.row_slice(i), tn.row_slice(i));
            let cp = cosine(ra, rp).ok_or(AutogradError::ZeroNorm("triplet_cosine"))?;
            let cn = cosine(ra, rn).ok_or(AutogradError::ZeroNorm("triplet_cosine"))?;
            total += triplet_hinge(cp, cn, margin, semantics);
        }
        let value = total / rows.max(1) as f64;
        self.push(
            Tensor::scalar(value),
            Op::Triplet {
                a,
                p,
                n,
                margin,
                semantics,
            },
            "triplet_cosine",
        )
    }

    /// Scaled dot-product self-attention over independent sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, heads * head_dim]`, rows grouped
    /// by sequence. Attention never crosses sequence boundaries.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(mismatch("attention", tq, tv));
        }
        let (rows, width) = (tq.rows(), tq.cols());
        if seq_len == 0 || heads == 0 || rows % seq_len != 0 || width % heads != 0 {
            return Err(AutogradError::Invalid(format!(
                "attention over {rows}x{width} with seq_len {seq_len} and {heads} heads"
            )));
        }
        let batch = rows / seq_len;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; rows * width];
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = (b * seq_len + i) * width + h * dh;
                    let prow = &mut probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = (b * seq_len + j) * width + h * dh;
                        *pj = dot(&qd[qi..qi + dh], &kd[kj..kj + dh]) * scale;
                    }
                    softmax_in_place(prow);
                    let oi = qi;
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = (b * seq_len + j) * width + h * dh;
                        for t in 0..dh {
                            out[oi + t] += pj * vd[vj + t];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_matrix(rows, width, out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutogradError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                leaf_grads[idx] = Some(g);
            }
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| (n.value.rows(), n.value.cols()))
            .collect();
        let params = self
            .params
            .iter()
            .map(|&(v, id)| {
                let t = leaf_grads[v.0].clone().unwrap_or_else(|| {
                    let (r, c) = self.dims(v);
                    Tensor::zeros(r, c)
                });
                (id, t)
            })
            .collect();
        Ok(Gradients {
            nodes: leaf_grads,
            shapes,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let ta = val(*a);
                let tb = val(*b);
                let (m, k) = (ta.rows(), ta.cols());
                let n = g.cols();
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, false, tb.data(), !*trans_b, &mut da, 0.0);
                accumulate(grads, *a, Tensor::from_matrix(m, k, da)?);
                if *trans_b {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, ta.data(), false, &mut db, 0.0);
                    accumulate(grads, *b, Tensor::from_matrix(n, k, db)?);
                } else {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut db, 0.0);
                    accumulate(grads, *b, Tensor::from_matrix(k, n, db)?);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip(g, val(*b), |x, y| x * y));
                accumulate(grads, *b, zip(g, val(*a), |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(x, row) => {
                let (r, c) = (g.rows(), g.cols());
                let rv = val(*row).data();
                let xv = val(*x).data();
                let mut dx = vec![0.0; r * c];
                let mut drow = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gd[i * c + j] * rv[j];
                        drow[j] += gd[i * c + j] * xv[i * c + j];
                    }
                }
                accumulate(grads, *x, Tensor::from_matrix(r, c, dx)?);
                accumulate(grads, *row, Tensor::row(drow));
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let t = zip(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, t);
            }
            Op::Gelu(x) => {
                let t = zip(g, val(*x), |gv, xv| {
                    gv * (std_normal_cdf(xv) + xv * std_normal_pdf(xv))
                });
                accumulate(grads, *x, t);
            }
            Op::Sigmoid(x) => {
                let t = zip(g, &node.value, |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *x, t);
            }
            Op::Softmax(x) => {
                let (r, c) = (g.rows(), g.cols());
                let y = node.value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let (gr, yr) = (&gd[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                    let s = dot(gr, yr);
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *x, Tensor::from_matrix(r, c, dx)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let (r, c) = (g.rows(), g.cols());
                let y = node.value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let (gr, yr) = (&gd[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = dot(gr, yr) / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                accumulate(grads, *x, Tensor::from_matrix(r, c, dx)?);
            }
            Op::Dropout { x, mask } => {
                let data = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = val(p).rows();
                    let data = gd[offset * c..(offset + r) * c].to_vec();
                    accumulate(grads, p, Tensor::from_matrix(r, c, data)?);
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        data.extend_from_slice(&gd[i * total + offset..i * total + offset + c]);
                    }
                    accumulate(grads, p, Tensor::from_matrix(r, c, data)?);
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let mut dx = vec![0.0; r * c];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, Tensor::from_matrix(r, c, dx)?);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let len = g.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, Tensor::from_matrix(r, c, dx)?);
            }
            Op::Gather { table, indices } => {
                let (r, c) = (val(*table).rows(), val(*table).cols());
                let mut dt = vec![0.0; r * c];
                for (i, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt[src * c + j] += gd[i * c + j];
                    }
                }
                accumulate(grads, *table, Tensor::from_matrix(r, c, dt)?);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::Sum(x) => {
                let tx = val(*x);
                accumulate(grads, *x, Tensor::filled(tx.rows(), tx.cols(), gd[0]));
            }
            Op::Mean(x) => {
                let tx = val(*x);
                let s = gd[0] / tx.len().max(1) as f64;
                accumulate(grads, *x, Tensor::filled(tx.rows(), tx.cols(), s));
            }
            Op::SumAbs(x) => {
                let s = gd[0];
                let t = val(*x).map(|v| {
                    if v > 0.0 {
                        s
                    } else if v < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, t);
            }
            Op::SumSquares(x) => {
                let s = gd[0];
                accumulate(grads, *x, val(*x).map(|v| 2.0 * v * s));
            }
            Op::Bce { pred, target } => {
                let tp = val(*pred);
                let s = gd[0] / tp.rows().max(1) as f64;
                let t = zip(tp, target, |p, y| {
                    if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                        0.0
                    } else {
                        s * (-y / p + (1.0 - y) / (1.0 - p))
                    }
                });
                accumulate(grads, *pred, t);
            }
            Op::Mse { a, b } => {
                let ta = val(*a);
                let s = 2.0 * gd[0] / ta.len().max(1) as f64;
                let da = zip(ta, val(*b), |x, y| s * (x - y));
                accumulate(grads, *b, da.map(|v| -v));
                accumulate(grads, *a, da);
            }
            Op::Triplet {
                a,
                p,
                n,
                margin,
                semantics,
            } => {
                let (ta, tp, tn) = (val(*a), val(*p), val(*n));
                let (rows, c) = (ta.rows(), ta.cols());
                let s = gd[0] / rows.max(1) as f64;
                let mut da = vec![0.0; rows * c];
                let mut dp = vec![0.0; rows * c];
                let mut dn = vec![0.0; rows * c];
                for i in 0..rows {
                    let (ra, rp, rn) = (ta.row_slice(i), tp.row_slice(i), tn.row_slice(i));
                    let cp = cosine(ra, rp).ok_or(AutogradError::ZeroNorm("triplet_cosine"))?;
                    let cn = cosine(ra, rn).ok_or(AutogradError::ZeroNorm("triplet_cosine"))?;
                    if triplet_hinge(cp, cn, *margin, *semantics) <= 0.0 {
                        continue;
                    }
                    // d loss / d cos(a,p) and d loss / d cos(a,n)
                    let (wp, wn) = match semantics {
                        TripletSemantics::Corrected => (-s, s),
                        TripletSemantics::Literal => (s, -s),
                    };
                    let range = i * c..(i + 1) * c;
                    cosine_grad(ra, rp, wp, &mut da[range.clone()], &mut dp[range.clone()]);
                    cosine_grad(ra, rn, wn, &mut da[range.clone()], &mut dn[range]);
                }
                accumulate(grads, *a, Tensor::from_matrix(rows, c, da)?);
                accumulate(grads, *p, Tensor::from_matrix(rows, c, dp)?);
                accumulate(grads, *n, Tensor::from_matrix(rows, c, dn)?);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (rows, width) = (tq.rows(), tq.cols());
                let (seq_len, heads) = (*seq_len, *heads);
                let batch = rows / seq_len;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![0.0; rows * width];
                let mut dk = vec![0.0; rows * width];
                let mut dv = vec![0.0; rows * width];
                let mut dp = vec![0.0; seq_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq_len * seq_len;
                        let at = |i: usize| (b * seq_len + i) * width + h * dh;
                        for i in 0..seq_len {
                            let prow = &probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                            let go = &gd[at(i)..at(i) + dh];
                            for j in 0..seq_len {
                                dp[j] = dot(go, &vd[at(j)..at(j) + dh]);
                                for t in 0..dh {
                                    dv[at(j) + t] += prow[j] * go[t];
                                }
                            }
                            let mix = dot(&dp, prow);
                            for j in 0..seq_len {
                                let ds = prow[j] * (dp[j] - mix) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    dq[at(i) + t] += ds * kd[at(j) + t];
                                    dk[at(j) + t] += ds * qd[at(i) + t];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *q, Tensor::from_matrix(rows, width, dq)?);
                accumulate(grads, *k, Tensor::from_matrix(rows, width, dk)?);
                accumulate(grads, *v, Tensor::from_matrix(rows, width, dv)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same-shape zip")
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data().chunks(c.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Cosine similarity; `None` when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn triplet_hinge(cos_ap: f64, cos_an: f64, margin: f64, semantics: TripletSemantics) -> f64 {
    match semantics {
        TripletSemantics::Corrected => (cos_an - cos_ap + margin).max(0.0),
        TripletSemantics::Literal => (cos_ap - cos_an + margin).max(0.0),
    }
}

/// Adds `w · d cos(u,v)/du` into `du` and `w · d cos(u,v)/dv` into `dv`.
fn cosine_grad(u: &[f64], v: &[f64], w: f64, du: &mut [f64], dv: &mut [f64]) {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    let c = dot(u, v) / (nu * nv);
    for i in 0..u.len() {
        du[i] += w * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
        dv[i] += w * (u[i] / (nu * nv) - c * v[i] / (nv * nv));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(x: f64) -> (Graph, Var) {
        let mut g = Graph::new(0);
        let v = g.input(Tensor::scalar(x)).unwrap();
        (g, v)
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new(0);
        let x = g.input(Tensor::row(vec![-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.841344746...
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut g = Graph::training(3);
        let x = g.input(Tensor::filled(1, 64, 1.0)).unwrap();
        let y = g.dropout(x, 0.25).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15);
        }
        assert!(g.value(y).data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut g = Graph::new(3);
        let x = g.input(Tensor::row(vec![1.0, -2.0, 3.0])).unwrap();
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut g = Graph::training(0);
        let x = g.input(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            g.dropout(x, 1.0),
            Err(AutogradError::InvalidProbability(_))
        ));
        assert!(matches!(
            g.dropout(x, -0.1),
            Err(AutogradError::InvalidProbability(_))
        ));
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let (mut g, p) = scalar_graph(0.5);
        let l = g.bce(p, &Tensor::scalar(1.0)).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let (mut g, x) = scalar_graph(0.0);
        let y = g.sigmoid(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data()[0], 0.25);
    }

    #[test]
    fn relu_derivative_negative_and_zero() {
        for x0 in [-1.0, 0.0] {
            let (mut g, x) = scalar_graph(x0);
            let y = g.relu(x).unwrap();
            let grads = g.backward(y).unwrap();
            assert_eq!(grads.wrt(x).data()[0], 0.0);
        }
    }

    #[test]
    fn triplet_corrected_is_zero_when_separated() {
        // cos(a,p) = 0.9, cos(a,n) = 0.1 with unit vectors in the plane
        let a = [1.0, 0.0];
        let p = [0.9, (1.0f64 - 0.81).sqrt()];
        let n = [0.1, (1.0f64 - 0.01).sqrt()];
        assert!((cosine(&a, &p).unwrap() - 0.9).abs() < 1e-12);
        let mut g = Graph::new(0);
        let va = g.input(Tensor::row(a.to_vec())).unwrap();
        let vp = g.input(Tensor::row(p.to_vec())).unwrap();
        let vn = g.input(Tensor::row(n.to_vec())).unwrap();
        let l = g
            .triplet_cosine(va, vp, vn, 0.2, TripletSemantics::Corrected)
            .unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let lit = g
            .triplet_cosine(va, vp, vn, 0.2, TripletSemantics::Literal)
            .unwrap();
        assert!((g.value(lit).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_rejects_zero_vectors() {
        let mut g = Graph::new(0);
        let a = g.input(Tensor::row(vec![0.0, 0.0])).unwrap();
        let p = g.input(Tensor::row(vec![1.0, 0.0])).unwrap();
        assert!(matches!(
            g.triplet_cosine(a, p, p, 0.2, TripletSemantics::Corrected),
            Err(AutogradError::ZeroNorm(_))
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new(0);
        let x = g.input(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(AutogradError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", crate::ParamKind::Weight, Tensor::row(vec![2.0]));
        let unused = store.add("unused", crate::ParamKind::Weight, Tensor::zeros(2, 3));
        let mut g = Graph::new(0);
        let u = g.param(&store, used).unwrap();
        let _ = g.param(&store, unused).unwrap();
        let l = g.sum_squares(u).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(used).unwrap().data(), &[4.0]);
        let z = grads.param(unused).unwrap();
        assert_eq!(z.shape(), &[2, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_twice_does_not_accumulate() {
        let (mut g, x) = scalar_graph(3.0);
        let y = g.sum_squares(x).unwrap();
        let first = g.backward(y).unwrap().wrt(x);
        let second = g.backward(y).unwrap().wrt(x);
        assert_eq!(first, second);
        assert_eq!(first.data(), &[6.0]);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let (mut g, x) = scalar_graph(f64::MAX);
        assert!(matches!(
            g.scale(x, 10.0),
            Err(AutogradError::NonFinite("scale"))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new(0);
        let x = g
            .input(Tensor::from_matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 700.0]).unwrap())
            .unwrap();
        let y = g.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

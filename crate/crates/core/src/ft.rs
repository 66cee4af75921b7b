//! FT-Transformer baseline: a per-feature tokenizer, a CLS token, one
//! post-norm encoder layer and a small classification head over the CLS
//! position.

use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use piiscan_autograd::nn::Linear;
use piiscan_autograd::{Graph, Optimizer, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, shuffled_batches};
use crate::table::{Column, TabularDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtVariant {
    None,
    Reduced,
    L1,
    L2,
    Dropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtConfig {
    pub dim: usize,
    pub heads: usize,
    pub variant: FtVariant,
    pub lambda: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 8,
            variant: FtVariant::None,
            lambda: 0.01,
            dropout: 0.25,
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            patience: 10,
            seed: 0,
        }
    }
}

impl FtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        if self.head_width() == 0 {
            return Err(Error::Config(
                "embedding dimension too small for the head".into(),
            ));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.lambda < 0.0 {
            return Err(Error::Config(
                "invalid batch size, learning rate or lambda".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        match self.variant {
            FtVariant::Reduced => self.dim / 4,
            _ => self.dim / 2,
        }
    }
}

/// Vocabularies and numerical scaling fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTokenizer {
    /// Dataset column of each numerical feature, in column order.
    pub numerical: Vec<usize>,
    pub categorical: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Per categorical feature, value -> table row (row 0 is out of vocabulary).
    pub vocabs: Vec<IndexMap<String, usize>>,
}

impl FeatureTokenizer {
    pub fn fit(ds: &TabularDataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("tokenizer training split is empty"));
        }
        let mut tok = FeatureTokenizer {
            numerical: Vec::new(),
            categorical: Vec::new(),
            means: Vec::new(),
            stds: Vec::new(),
            vocabs: Vec::new(),
        };
        for (j, col) in ds.columns().iter().enumerate() {
            match col {
                Column::Numerical(v) => {
                    let n = rows.len() as f64;
                    let mean = rows.iter().map(|&i| v[i]).sum::<f64>() / n;
                    let var = rows.iter().map(|&i| (v[i] - mean).powi(2)).sum::<f64>() / n;
                    let std = var.sqrt();
                    tok.numerical.push(j);
                    tok.means.push(mean);
                    tok.stds.push(if std > 1e-12 { std } else { 1.0 });
                }
                Column::Categorical(v) => {
                    let mut vocab = IndexMap::new();
                    for &i in rows {
                        let next = vocab.len() + 1;
                        vocab.entry(v[i].clone()).or_insert(next);
                    }
                    tok.categorical.push(j);
                    tok.vocabs.push(vocab);
                }
            }
        }
        Ok(tok)
    }

    pub fn n_tokens(&self) -> usize {
        1 + self.numerical.len() + self.categorical.len()
    }

    pub fn index_of(&self, c: usize, value: &str) -> usize {
        self.vocabs[c].get(value).copied().unwrap_or(0)
    }

    pub fn batch(&self, ds: &TabularDataset, rows: &[usize]) -> Result<FtBatch> {
        let width = self.numerical.len() + self.categorical.len();
        if ds.n_features() != width {
            return Err(Error::Dimension {
                expected: width,
                got: ds.n_features(),
            });
        }
        let mut numerical = Vec::with_capacity(rows.len() * self.numerical.len());
        let mut categorical = Vec::with_capacity(rows.len() * self.categorical.len());
        for &i in rows {
            for (n, &j) in self.numerical.iter().enumerate() {
                let Column::Numerical(v) = ds.column(j) else {
                    return Err(Error::Dataset(format!("column {j} is no longer numerical")));
                };
                numerical.push((v[i] - self.means[n]) / self.stds[n]);
            }
            for (c, &j) in self.categorical.iter().enumerate() {
                let Column::Categorical(v) = ds.column(j) else {
                    return Err(Error::Dataset(format!(
                        "column {j} is no longer categorical"
                    )));
                };
                categorical.push(self.index_of(c, &v[i]));
            }
        }
        Ok(FtBatch {
            rows: rows.len(),
            numerical,
            categorical,
        })
    }
}

/// Encoded inputs, row-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FtBatch {
    pub rows: usize,
    pub numerical: Vec<f64>,
    pub categorical: Vec<usize>,
}

impl FtBatch {
    pub fn select(&self, idx: &[usize]) -> FtBatch {
        let nn = self.numerical.len() / self.rows.max(1);
        let nc = self.categorical.len() / self.rows.max(1);
        let mut out = FtBatch {
            rows: idx.len(),
            numerical: Vec::with_capacity(idx.len() * nn),
            categorical: Vec::with_capacity(idx.len() * nc),
        };
        for &i in idx {
            out.numerical
                .extend_from_slice(&self.numerical[i * nn..(i + 1) * nn]);
            out.categorical
                .extend_from_slice(&self.categorical[i * nc..(i + 1) * nc]);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Layers {
    num_w: ParamId,
    num_b: ParamId,
    tables: Vec<ParamId>,
    cls: ParamId,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
    head1: Linear,
    head2: Linear,
}

#[derive(Debug, Clone)]
pub struct FtModel {
    pub tokenizer: FeatureTokenizer,
    pub config: FtConfig,
    params: ParamStore,
    layers: Layers,
}

fn uniform_param<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    kind: ParamKind,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> ParamId {
    let limit = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    store.add(
        name,
        kind,
        Tensor::from_matrix(rows, cols, data).expect("shape"),
    )
}

impl FtModel {
    pub fn new(tokenizer: FeatureTokenizer, config: FtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let q = config.dim;
        let mut rng = seeded(seed, 0xF700);
        let mut params = ParamStore::new();
        let nn = tokenizer.numerical.len().max(1);
        let num_w = uniform_param(
            &mut params,
            "tok.num.weight",
            ParamKind::Weight,
            nn,
            q,
            &mut rng,
        );
        let num_b = uniform_param(
            &mut params,
            "tok.num.bias",
            ParamKind::Bias,
            nn,
            q,
            &mut rng,
        );
        let tables = tokenizer
            .vocabs
            .iter()
            .enumerate()
            .map(|(c, v)| {
                uniform_param(
                    &mut params,
                    &format!("tok.cat{c}"),
                    ParamKind::Weight,
                    v.len() + 1,
                    q,
                    &mut rng,
                )
            })
            .collect();
        let cls = uniform_param(&mut params, "cls", ParamKind::Weight, 1, q, &mut rng);
        let hw = config.head_width();
        let layers = Layers {
            num_w,
            num_b,
            tables,
            cls,
            wq: Linear::new(&mut params, "attn.q", q, q, &mut rng),
            wk: Linear::new(&mut params, "attn.k", q, q, &mut rng),
            wv: Linear::new(&mut params, "attn.v", q, q, &mut rng),
            wo: Linear::new(&mut params, "attn.o", q, q, &mut rng),
            ff1: Linear::new(&mut params, "ffn.0", q, 2 * q, &mut rng),
            ff2: Linear::new(&mut params, "ffn.1", 2 * q, q, &mut rng),
            head1: Linear::new(&mut params, "head.0", q, hw, &mut rng),
            head2: Linear::new(&mut params, "head.1", hw, 1, &mut rng),
        };
        Ok(Self {
            tokenizer,
            config,
            params,
            layers,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn seq_len(&self) -> usize {
        self.tokenizer.n_tokens()
    }

    /// `relu(W[n] * x + b[n])` for every sample and numerical feature, as
    /// one `[batch, Q]` block per feature.
    pub fn tokenize_numerical(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &FtBatch,
    ) -> Result<Vec<Var>> {
        let nn = self.tokenizer.numerical.len();
        if batch.numerical.len() != batch.rows * nn {
            return Err(Error::Dimension {
                expected: batch.rows * nn,
                got: batch.numerical.len(),
            });
        }
        let w = g.param(store, self.layers.num_w)?;
        let b = g.param(store, self.layers.num_b)?;
        let mut out = Vec::with_capacity(nn);
        for n in 0..nn {
            let col: Vec<f64> = (0..batch.rows)
                .map(|k| batch.numerical[k * nn + n])
                .collect();
            let x = g.input(Tensor::from_matrix(batch.rows, 1, col)?)?;
            let wn = g.slice_rows(w, n, 1)?;
            let bn = g.slice_rows(b, n, 1)?;
            let h = g.matmul(x, wn)?;
            let h = g.add_row(h, bn)?;
            out.push(g.relu(h)?);
        }
        Ok(out)
    }

    pub fn tokenize_categorical(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &FtBatch,
    ) -> Result<Vec<Var>> {
        let nc = self.tokenizer.categorical.len();
        if batch.categorical.len() != batch.rows * nc {
            return Err(Error::Dimension {
                expected: batch.rows * nc,
                got: batch.categorical.len(),
            });
        }
        let mut out = Vec::with_capacity(nc);
        for (c, &table) in self.layers.tables.iter().enumerate() {
            let idx: Vec<usize> = (0..batch.rows)
                .map(|k| batch.categorical[k * nc + c])
                .collect();
            let t = g.param(store, table)?;
            out.push(g.gather_rows(t, &idx)?);
        }
        Ok(out)
    }

    /// Transformer output, `[batch * seq_len, Q]` with rows grouped by sample
    /// and the CLS token first in each group.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &FtBatch) -> Result<Var> {
        let b = batch.rows;
        if b == 0 {
            return Err(Error::EmptyInput("empty batch"));
        }
        let cls = g.param(store, self.layers.cls)?;
        let mut blocks = vec![g.gather_rows(cls, &vec![0; b])?];
        blocks.extend(self.tokenize_numerical(g, store, batch)?);
        blocks.extend(self.tokenize_categorical(g, store, batch)?);
        let t = blocks.len();
        let stacked = g.concat_rows(&blocks)?;
        // token-major -> sample-major
        let order: Vec<usize> = (0..b)
            .flat_map(|k| (0..t).map(move |j| j * b + k))
            .collect();
        let x = g.gather_rows(stacked, &order)?;

        let l = &self.layers;
        let q = l.wq.forward(g, store, x)?;
        let k = l.wk.forward(g, store, x)?;
        let v = l.wv.forward(g, store, x)?;
        let a = g.attention(q, k, v, t, self.config.heads)?;
        let a = l.wo.forward(g, store, a)?;
        let h = g.add(x, a)?;
        let h = g.layer_norm(h)?;
        let f = l.ff1.forward(g, store, h)?;
        let f = g.relu(f)?;
        let f = l.ff2.forward(g, store, f)?;
        let out = g.add(h, f)?;
        Ok(g.layer_norm(out)?)
    }

    /// Head over the CLS rows of an encoded batch.
    pub fn head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded: Var,
        rows: usize,
    ) -> Result<Var> {
        let t = self.seq_len();
        let cls_rows: Vec<usize> = (0..rows).map(|k| k * t).collect();
        let c = g.gather_rows(encoded, &cls_rows)?;
        let c = g.layer_norm(c)?;
        let h = self.layers.head1.forward(g, store, c)?;
        let mut h = g.relu(h)?;
        if self.config.variant == FtVariant::Dropout {
            h = g.dropout(h, self.config.dropout)?;
        }
        let y = self.layers.head2.forward(g, store, h)?;
        Ok(g.sigmoid(y)?)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &FtBatch) -> Result<Var> {
        let enc = self.encode(g, store, batch)?;
        self.head(g, store, enc, batch.rows)
    }

    /// λ-weighted penalty of the configured variant over all weights.
    pub fn penalty(&self, g: &mut Graph, store: &ParamStore) -> Result<Option<Var>> {
        let l1 = match self.config.variant {
            FtVariant::L1 => true,
            FtVariant::L2 => false,
            _ => return Ok(None),
        };
        let mut total: Option<Var> = None;
        for id in store.weight_ids() {
            let p = g.param(store, id)?;
            let s = if l1 { g.sum_abs(p)? } else { g.sum_squares(p)? };
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        match total {
            Some(t) => Ok(Some(g.scale(t, self.config.lambda)?)),
            None => Ok(None),
        }
    }

    /// Training objective; returns `(loss, bce, penalty)` nodes.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &FtBatch,
        y: &[f64],
    ) -> Result<(Var, Var, Option<Var>)> {
        let p = self.forward(g, store, batch)?;
        let target = Tensor::from_matrix(y.len(), 1, y.to_vec())?;
        let bce = g.bce(p, &target)?;
        let pen = self.penalty(g, store)?;
        let loss = match pen {
            Some(pv) => g.add(bce, pv)?,
            None => bce,
        };
        Ok((loss, bce, pen))
    }

    pub fn predict_proba(&self, batch: &FtBatch) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.rows);
        for chunk in (0..batch.rows).collect::<Vec<_>>().chunks(512) {
            let mut g = Graph::new(0);
            let p = self.forward(&mut g, &self.params, &batch.select(chunk))?;
            out.extend_from_slice(g.value(p).data());
        }
        Ok(out)
    }

    pub fn predict(&self, batch: &FtBatch) -> Result<Vec<bool>> {
        Ok(self
            .predict_proba(batch)?
            .into_iter()
            .map(|p| p > 0.5)
            .collect())
    }

    pub fn accuracy(&self, batch: &FtBatch, labels: &[bool]) -> Result<f64> {
        let pred = self.predict(batch)?;
        let hits = pred.iter().zip(labels).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes the parameters to `path` and the tokenizer and config next to
    /// it as `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let meta = serde_json::json!({ "tokenizer": self.tokenizer, "config": self.config });
        std::fs::write(Self::meta_path(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            tokenizer: FeatureTokenizer,
            config: FtConfig,
        }
        let meta: Meta = serde_json::from_slice(&std::fs::read(Self::meta_path(path))?)?;
        let mut m = Self::new(meta.tokenizer, meta.config, 0)?;
        m.params.load(path)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FtEpoch {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FtOutcome {
    pub model: FtModel,
    pub best_epoch: usize,
    pub history: Vec<FtEpoch>,
}

pub fn write_epochs_csv<W: Write>(history: &[FtEpoch], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_acc", "val_acc", "loss"])?;
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            e.train_acc.to_string(),
            e.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            e.loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fits the tokenizer on `train` and trains with Adam on BCE plus the
/// variant penalty. With a validation split, training stops after
/// `patience` epochs without improvement and the best parameters are kept.
pub fn train_ft(
    ds: &TabularDataset,
    train: &[usize],
    val: Option<&[usize]>,
    cfg: &FtConfig,
) -> Result<FtOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("transformer training split is empty"));
    }
    if val.is_some_and(|v| v.is_empty()) {
        return Err(Error::EmptyInput("transformer validation split is empty"));
    }
    let tokenizer = FeatureTokenizer::fit(ds, train)?;
    let mut model = FtModel::new(tokenizer, cfg.clone(), cfg.seed)?;
    let xb = model.tokenizer.batch(ds, train)?;
    let labels: Vec<bool> = train.iter().map(|&i| ds.labels()[i]).collect();
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let val = match val {
        Some(v) => Some((
            model.tokenizer.batch(ds, v)?,
            v.iter().map(|&i| ds.labels()[i]).collect::<Vec<_>>(),
        )),
        None => None,
    };
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut rng = seeded(cfg.seed, 0xF701);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in shuffled_batches(xb.rows, cfg.batch_size, &mut rng) {
            let batch = xb.select(&idx);
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            step += 1;
            let mut g = Graph::training(crate::rng::derive_seed(cfg.seed, step));
            let (loss, _, _) = model
                .loss(&mut g, &model.params, &batch, &yb)
                .map_err(|_| Error::NonFiniteLoss(epoch))?;
            total += g.value(loss).data()[0] * idx.len() as f64;
            let grads = g.backward(loss).map_err(|_| Error::NonFiniteLoss(epoch))?;
            opt.step(&mut model.params, &grads);
        }
        let loss = total / xb.rows as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        let train_acc = model.accuracy(&xb, &labels)?;
        let val_acc = match &val {
            Some((vb, vl)) => Some(model.accuracy(vb, vl)?),
            None => None,
        };
        history.push(FtEpoch {
            epoch,
            train_acc,
            val_acc,
            loss,
        });
        if let Some(acc) = val_acc {
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.params.clone()));
            } else if epoch - best.as_ref().unwrap().1 >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => history.len(),
    };
    Ok(FtOutcome {
        model,
        best_epoch,
        history,
    })
}

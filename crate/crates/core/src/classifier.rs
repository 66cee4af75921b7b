//! MLP classifier for binary leak detection and multi-label PII types,
//! with metrics and k-fold evaluation.

use std::fmt::Write as _;
use std::io::Write;

use log::warn;
use piiscan_autograd::nn::{Activation, Mlp};
use piiscan_autograd::{Graph, Optimizer, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::Matrix;
use crate::prep::FoldSplit;
use crate::rng::{derive_seed, seeded, shuffled_batches};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            max_epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            batch_size: 256,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "classifier widths, batch size and learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(
                "decision threshold must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Binary,
    LeakOnly,
    Combined,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    params: ParamStore,
    mlp: Mlp,
    threshold: f64,
}

impl MlpModel {
    pub fn new(inputs: usize, outputs: usize, cfg: &MlpConfig, seed: u64) -> Self {
        let mut widths = vec![inputs];
        widths.extend(&cfg.hidden);
        widths.push(outputs);
        let mut acts = vec![Activation::Relu; cfg.hidden.len()];
        acts.push(Activation::Sigmoid);
        let mut rng = seeded(seed, 0xC1A5);
        let mut params = ParamStore::new();
        let mlp = Mlp::new(&mut params, "mlp", &widths, &acts, &mut rng);
        Self {
            params,
            mlp,
            threshold: cfg.threshold,
        }
    }

    pub fn inputs(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn outputs(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.inputs() {
            return Err(Error::Dimension {
                expected: self.inputs(),
                got: x.cols,
            });
        }
        let t = Tensor::from_matrix(x.rows, x.cols, x.data.clone())?;
        let p = self.mlp.apply(&self.params, &t)?;
        Matrix::new(x.rows, self.outputs(), p.into_data())
    }

    /// 0/1 per output, set iff the probability is strictly above the
    /// threshold.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut p = self.predict_proba(x)?;
        p.data
            .iter_mut()
            .for_each(|v| *v = (*v > self.threshold) as u8 as f64);
        Ok(p)
    }

    pub fn predict_binary(&self, x: &Matrix) -> Result<Vec<bool>> {
        Ok(self
            .predict(x)?
            .data
            .chunks(self.outputs())
            .map(|r| r[0] > 0.5)
            .collect())
    }

    /// Row-major 0/1 type matrix.
    pub fn predict_types(&self, x: &Matrix) -> Result<Vec<u8>> {
        Ok(self.predict(x)?.data.iter().map(|&v| v as u8).collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn load(
        path: &std::path::Path,
        inputs: usize,
        outputs: usize,
        cfg: &MlpConfig,
    ) -> Result<Self> {
        let mut m = Self::new(inputs, outputs, cfg, 0);
        m.params.load(path)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Mean bitwise agreement between 0/1 matrices.
fn bit_accuracy(pred: &Matrix, y: &Matrix) -> f64 {
    let hits = pred
        .data
        .iter()
        .zip(&y.data)
        .filter(|(p, t)| (**p > 0.5) == (**t > 0.5))
        .count();
    hits as f64 / pred.data.len().max(1) as f64
}

/// Trains with early stopping on validation accuracy when `val` is given,
/// otherwise for exactly `epochs` epochs (defaulting to the maximum).
pub fn train_mlp(
    x: &Matrix,
    y: &Matrix,
    val: Option<(&Matrix, &Matrix)>,
    epochs: Option<usize>,
    cfg: &MlpConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if x.rows != y.rows {
        return Err(Error::Dimension {
            expected: x.rows,
            got: y.rows,
        });
    }
    if x.rows == 0 {
        return Err(Error::EmptyInput("classifier training set is empty"));
    }
    if !x.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite classifier input".into()));
    }
    for c in 0..y.cols {
        let pos = (0..y.rows)
            .filter(|&i| y.data[i * y.cols + c] > 0.5)
            .count();
        if pos == 0 || pos == y.rows {
            warn!("label column {c} has a single class in the training data");
        }
    }
    let mut model = MlpModel::new(x.cols, y.cols, cfg, seed);
    let xt = Tensor::from_matrix(x.rows, x.cols, x.data.clone())?;
    let yt = Tensor::from_matrix(y.rows, y.cols, y.data.clone())?;
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut rng = seeded(seed, 0xC1A6);
    let max_epochs = epochs.unwrap_or(cfg.max_epochs);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=max_epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(x.rows, cfg.batch_size, &mut rng) {
            let xb = xt.select_rows(&batch);
            let yb = yt.select_rows(&batch);
            let mut g = Graph::new(0);
            let loss = (|| {
                let xi = g.input(xb)?;
                let p = model.mlp.forward(&mut g, &model.params, xi)?;
                g.bce(p, &yb)
            })()
            .map_err(|_| Error::NonFiniteLoss(epoch))?;
            total += g.value(loss).data()[0] * batch.len() as f64;
            let grads = g.backward(loss).map_err(|_| Error::NonFiniteLoss(epoch))?;
            opt.step(&mut model.params, &grads);
        }
        let train_loss = total / x.rows as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        let val_accuracy = match val {
            Some((vx, vy)) => Some(bit_accuracy(&model.predict(vx)?, vy)),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
        if let Some(acc) = val_accuracy {
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
        None => max_epochs,
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions, so precision is reported as 0.
    pub precision_undefined: bool,
    /// Bitwise accuracy per label column.
    pub per_label_accuracy: Vec<f64>,
    pub macro_accuracy: f64,
}

/// Metrics over 0/1 prediction and truth matrices of equal shape. Binary
/// metrics are micro-averaged over every bit; for a single column they are
/// the usual ones.
pub fn split_metrics(pred: &Matrix, truth: &Matrix) -> Result<SplitMetrics> {
    if pred.rows != truth.rows || pred.cols != truth.cols {
        return Err(Error::Dimension {
            expected: truth.data.len(),
            got: pred.data.len(),
        });
    }
    if truth.rows == 0 {
        return Err(Error::EmptyInput("evaluation set is empty"));
    }
    let pb: Vec<bool> = pred.data.iter().map(|&v| v > 0.5).collect();
    let tb: Vec<bool> = truth.data.iter().map(|&v| v > 0.5).collect();
    let c = Confusion::from_pairs(&pb, &tb);
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    let precision_undefined = c.tp + c.fp == 0;
    let precision = if precision_undefined {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let per_label_accuracy: Vec<f64> = (0..truth.cols)
        .map(|col| {
            let hits = (0..truth.rows)
                .filter(|&i| pb[i * truth.cols + col] == tb[i * truth.cols + col])
                .count();
            hits as f64 / truth.rows as f64
        })
        .collect();
    let macro_accuracy =
        per_label_accuracy.iter().sum::<f64>() / per_label_accuracy.len().max(1) as f64;
    Ok(SplitMetrics {
        n: truth.rows,
        accuracy,
        precision,
        recall,
        f1,
        precision_undefined,
        per_label_accuracy,
        macro_accuracy,
    })
}

pub fn evaluate(model: &MlpModel, x: &Matrix, y: &Matrix) -> Result<SplitMetrics> {
    split_metrics(&model.predict(x)?, y)
}

fn mean_metrics(rows: &[&SplitMetrics]) -> SplitMetrics {
    let k = rows.len().max(1) as f64;
    let avg = |f: &dyn Fn(&SplitMetrics) -> f64| rows.iter().map(|m| f(m)).sum::<f64>() / k;
    let width = rows.first().map_or(0, |m| m.per_label_accuracy.len());
    SplitMetrics {
        n: rows.iter().map(|m| m.n).sum(),
        accuracy: avg(&|m| m.accuracy),
        precision: avg(&|m| m.precision),
        recall: avg(&|m| m.recall),
        f1: avg(&|m| m.f1),
        precision_undefined: rows.iter().any(|m| m.precision_undefined),
        per_label_accuracy: (0..width)
            .map(|c| rows.iter().map(|m| m.per_label_accuracy[c]).sum::<f64>() / k)
            .collect(),
        macro_accuracy: avg(&|m| m.macro_accuracy),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub label_names: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub mean_train: SplitMetrics,
    pub mean_val: SplitMetrics,
    /// Epochs used for the final model trained on the whole pool.
    pub final_epochs: usize,
    pub test: SplitMetrics,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>9} {:>9} {:>9} {:>9}",
            "split", "accuracy", "precision", "recall", "f1"
        );
        let mut line = |name: &str, m: &SplitMetrics| {
            let flag = if m.precision_undefined { "*" } else { "" };
            let _ = writeln!(
                s,
                "{:<10} {:>9.4} {:>8.4}{:1} {:>9.4} {:>9.4}",
                name, m.accuracy, m.precision, flag, m.recall, m.f1
            );
        };
        for f in &self.folds {
            line(&format!("fold{}-val", f.fold), &f.val);
        }
        line("mean-train", &self.mean_train);
        line("mean-val", &self.mean_val);
        line("test", &self.test);
        if self.label_names.len() > 1 {
            let _ = writeln!(s, "\n{:<16} {:>9} {:>9}", "label", "val", "test");
            for (c, name) in self.label_names.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{:<16} {:>9.4} {:>9.4}",
                    name, self.mean_val.per_label_accuracy[c], self.test.per_label_accuracy[c]
                );
            }
        }
        s
    }

    pub fn write_per_label_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "mean_val_accuracy", "test_accuracy"])?;
        for (c, name) in self.label_names.iter().enumerate() {
            w.write_record([
                name.clone(),
                self.mean_val.per_label_accuracy[c].to_string(),
                self.test.per_label_accuracy[c].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rotates validation over the folds of `split`, then retrains on the whole
/// pool for the median best epoch and scores the held-out test set.
pub fn cross_validate(
    x: &Matrix,
    y: &Matrix,
    split: &FoldSplit,
    mode: EvalMode,
    label_names: &[String],
    cfg: &MlpConfig,
) -> Result<EvalReport> {
    Ok(cross_validate_with_model(x, y, split, mode, label_names, cfg)?.0)
}

/// [`cross_validate`] that also hands back the final pool model.
pub fn cross_validate_with_model(
    x: &Matrix,
    y: &Matrix,
    split: &FoldSplit,
    mode: EvalMode,
    label_names: &[String],
    cfg: &MlpConfig,
) -> Result<(EvalReport, MlpModel)> {
    if x.rows != y.rows {
        return Err(Error::Dimension {
            expected: x.rows,
            got: y.rows,
        });
    }
    if label_names.len() != y.cols {
        return Err(Error::Dimension {
            expected: y.cols,
            got: label_names.len(),
        });
    }
    check_split(split, x.rows)?;
    let mut folds = Vec::with_capacity(split.k());
    for f in 0..split.k() {
        let tr = split.train_indices(f);
        let va = &split.fold_indices[f];
        let (xt, yt) = (x.select_rows(&tr), y.select_rows(&tr));
        let (xv, yv) = (x.select_rows(va), y.select_rows(va));
        let out = train_mlp(
            &xt,
            &yt,
            Some((&xv, &yv)),
            None,
            cfg,
            derive_seed(cfg.seed, f as u64),
        )?;
        folds.push(FoldResult {
            fold: f,
            best_epoch: out.best_epoch,
            train: evaluate(&out.model, &xt, &yt)?,
            val: evaluate(&out.model, &xv, &yv)?,
        });
    }
    let mut epochs: Vec<usize> = folds.iter().map(|f| f.best_epoch).collect();
    epochs.sort_unstable();
    let final_epochs = epochs[(epochs.len() - 1) / 2].max(1);
    let pool = split.pool();
    let final_model = train_mlp(
        &x.select_rows(&pool),
        &y.select_rows(&pool),
        None,
        Some(final_epochs),
        cfg,
        derive_seed(cfg.seed, split.k() as u64),
    )?
    .model;
    let test = evaluate(
        &final_model,
        &x.select_rows(&split.test_indices),
        &y.select_rows(&split.test_indices),
    )?;
    let trains: Vec<&SplitMetrics> = folds.iter().map(|f| &f.train).collect();
    let vals: Vec<&SplitMetrics> = folds.iter().map(|f| &f.val).collect();
    let report = EvalReport {
        mode,
        label_names: label_names.to_vec(),
        mean_train: mean_metrics(&trains),
        mean_val: mean_metrics(&vals),
        folds,
        final_epochs,
        test,
    };
    Ok((report, final_model))
}

/// Folds pairwise disjoint, disjoint from the test set, all in range.
pub fn check_split(split: &FoldSplit, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in split
        .fold_indices
        .iter()
        .flatten()
        .chain(&split.test_indices)
    {
        if i >= n || seen[i] {
            return Err(Error::Dataset(format!(
                "fold split reuses or exceeds index {i}"
            )));
        }
        seen[i] = true;
    }
    if split.test_indices.is_empty() || split.fold_indices.iter().any(Vec::is_empty) {
        return Err(Error::Dataset("fold split has an empty part".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_all_negative() {
        let t = m(4, 1, &[1.0, 0.0, 1.0, 0.0]);
        let p = split_metrics(&t, &t).unwrap();
        assert_eq!(
            (p.accuracy, p.precision, p.recall, p.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let z = split_metrics(&m(4, 1, &[0.0; 4]), &t).unwrap();
        assert_eq!((z.accuracy, z.recall, z.precision), (0.5, 0.0, 0.0));
        assert!(z.precision_undefined);
        assert!(split_metrics(&m(0, 1, &[]), &m(0, 1, &[])).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let cfg = MlpConfig {
            hidden: vec![2],
            ..MlpConfig::default()
        };
        let mut model = MlpModel::new(1, 1, &cfg, 0);
        // zero every parameter so the output is sigmoid(0) = 0.5
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            model
                .params_mut()
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let x = m(1, 1, &[3.0]);
        assert_eq!(model.predict_proba(&x).unwrap().data, vec![0.5]);
        assert_eq!(model.predict_binary(&x).unwrap(), vec![false]);
    }

    #[test]
    fn xor_is_learned() {
        let pts = [
            (0.0, 0.0, 0.0),
            (0.0, 1.0, 1.0),
            (1.0, 0.0, 1.0),
            (1.0, 1.0, 0.0),
        ];
        let mut xd = Vec::new();
        let mut yd = Vec::new();
        for _ in 0..8 {
            for &(a, b, c) in &pts {
                xd.extend([a, b]);
                yd.push(c);
            }
        }
        let x = m(32, 2, &xd);
        let y = m(32, 1, &yd);
        let cfg = MlpConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            ..MlpConfig::default()
        };
        let out = train_mlp(&x, &y, None, Some(200), &cfg, 7).unwrap();
        assert_eq!(evaluate(&out.model, &x, &y).unwrap().accuracy, 1.0);
    }
}

//! Dense autoencoder compressing 384-dimensional embeddings to 32.

use std::io::Write;
use std::path::Path;

use piiscan_autograd::nn::{Activation, Mlp};
use piiscan_autograd::{Graph, Optimizer, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::rng::{seeded, shuffled_batches};

pub const DEFAULT_WIDTHS: [usize; 4] = [384, 128, 64, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    /// Encoder widths from input to latent; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    /// Train on distinct vectors only.
    pub dedup: bool,
    /// Cap on training vectors drawn from a store; 0 means unlimited.
    pub max_vectors: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            widths: DEFAULT_WIDTHS.to_vec(),
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 128,
            holdout_fraction: 0.1,
            dedup: true,
            max_vectors: 0,
            seed: 0,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(
                "autoencoder widths need at least two positive entries".into(),
            ));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "autoencoder batch size and learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub holdout_mse: f64,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    widths: Vec<usize>,
    curve: Vec<EpochLoss>,
}

fn activations(n: usize) -> Vec<Activation> {
    let mut acts = vec![Activation::Relu; n];
    if let Some(last) = acts.last_mut() {
        *last = Activation::Identity;
    }
    acts
}

impl Autoencoder {
    pub fn new(widths: &[usize], seed: u64) -> Self {
        let mut rng = seeded(seed, 0xAE00);
        let mut params = ParamStore::new();
        let n = widths.len() - 1;
        let encoder = Mlp::new(&mut params, "encoder", widths, &activations(n), &mut rng);
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let decoder = Mlp::new(&mut params, "decoder", &rev, &activations(n), &mut rng);
        Self {
            params,
            encoder,
            decoder,
            widths: widths.to_vec(),
            curve: Vec::new(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn latent_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Entry 0 is the untrained model; entry `e` follows epoch `e`.
    pub fn curve(&self) -> &[EpochLoss] {
        &self.curve
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_width() {
            return Err(Error::Dimension {
                expected: self.input_width(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        Ok(self.encoder.apply(&self.params, x)?)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode(x)?;
        Ok(self.decoder.apply(&self.params, &z)?)
    }

    pub fn mse(&self, x: &Tensor) -> Result<f64> {
        if x.rows() == 0 {
            return Ok(0.0);
        }
        let r = self.reconstruct(x)?;
        let sq: f64 = r
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq / x.len() as f64)
    }

    /// Re-encodes every vector of a raw store into the latent space.
    pub fn compress_store(&self, store: &EmbeddingStore) -> Result<EmbeddingStore> {
        if store.dim() != self.input_width() {
            return Err(Error::Dimension {
                expected: self.input_width(),
                got: store.dim(),
            });
        }
        let mask = vec![true; store.n_features()];
        store.transform(&mask, self.latent_width(), |block, m| {
            let x = Tensor::from_matrix(m, self.input_width(), block.to_vec())?;
            Ok(self.encode(&x)?.into_data())
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn load(path: &Path, widths: &[usize]) -> Result<Self> {
        let mut ae = Self::new(widths, 0);
        ae.params.load(path)?;
        Ok(ae)
    }

    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_mse", "holdout_mse"])?;
        for e in &self.curve {
            w.write_record([
                e.epoch.to_string(),
                e.train_mse.to_string(),
                e.holdout_mse.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Training vectors drawn from a store's pool: distinct when `dedup` is set,
/// capped at `max_vectors` by a seeded draw.
pub fn training_matrix(store: &EmbeddingStore, cfg: &AeConfig) -> Result<Tensor> {
    let dim = store.dim();
    let mut rows: Vec<usize> = if cfg.dedup {
        let mut seen = std::collections::HashSet::new();
        (0..store.pool_len())
            .filter(|&r| {
                seen.insert(
                    store
                        .pool_row(r)
                        .iter()
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    } else {
        (0..store.n_samples())
            .flat_map(|i| (0..store.n_features()).map(move |j| (i, j)))
            .map(|(i, j)| store.pool_index(i, j))
            .collect()
    };
    if cfg.max_vectors > 0 && rows.len() > cfg.max_vectors {
        let mut rng = seeded(cfg.seed, 0xAE01);
        rows.shuffle(&mut rng);
        rows.truncate(cfg.max_vectors);
        rows.sort_unstable();
    }
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend_from_slice(store.pool_row(r));
    }
    let m = data.len() / dim;
    Ok(Tensor::from_matrix(m, dim, data)?)
}

pub fn train_ae(vectors: &Tensor, cfg: &AeConfig) -> Result<Autoencoder> {
    cfg.validate()?;
    let mut ae = Autoencoder::new(&cfg.widths, cfg.seed);
    ae.check_width(vectors)?;
    let m = vectors.rows();
    if m < cfg.batch_size {
        return Err(Error::TooFewSamples(format!(
            "{m} vectors for batch size {}",
            cfg.batch_size
        )));
    }
    let mut rng = seeded(cfg.seed, 0xAE02);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let n_hold = ((m as f64 * cfg.holdout_fraction).round() as usize).min(m - 1);
    let holdout = vectors.select_rows(&order[..n_hold]);
    let train = vectors.select_rows(&order[n_hold..]);

    ae.curve.push(EpochLoss {
        epoch: 0,
        train_mse: ae.mse(&train)?,
        holdout_mse: ae.mse(&holdout)?,
    });
    let mut opt = Optimizer::adam(cfg.learning_rate);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(train.rows(), cfg.batch_size, &mut rng) {
            let xb = train.select_rows(&batch);
            let mut g = Graph::new(0);
            let loss = (|| {
                let x = g.input(xb.clone())?;
                let z = ae.encoder.forward(&mut g, &ae.params, x)?;
                let r = ae.decoder.forward(&mut g, &ae.params, z)?;
                g.mse(r, x)
            })()
            .map_err(|_| Error::NonFiniteLoss(epoch))?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss(epoch));
            }
            total += lv * batch.len() as f64;
            let grads = g.backward(loss).map_err(|_| Error::NonFiniteLoss(epoch))?;
            opt.step(&mut ae.params, &grads);
        }
        let holdout_mse = ae.mse(&holdout)?;
        if !holdout_mse.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        ae.curve.push(EpochLoss {
            epoch,
            train_mse: total / train.rows() as f64,
            holdout_mse,
        });
    }
    Ok(ae)
}

//! Triplet mining over feature centroids, the projection head trained on
//! those triplets, and embedding replacement.

use std::io::Write;

use log::warn;
use piiscan_autograd::nn::{Activation, Mlp};
use piiscan_autograd::{triplet_hinge, Graph, Optimizer, ParamStore, Tensor, TripletSemantics};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::ifcs::{cosine, similarity_matrix};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSemantics {
    #[default]
    Corrected,
    Literal,
}

impl From<LossSemantics> for TripletSemantics {
    fn from(s: LossSemantics) -> Self {
        match s {
            LossSemantics::Corrected => TripletSemantics::Corrected,
            LossSemantics::Literal => TripletSemantics::Literal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub mode: MiningMode,
    pub hi: f64,
    pub lo: f64,
    /// Either condition suffices for soft candidates instead of both.
    pub union: bool,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            mode: MiningMode::Hard,
            hi: 0.6,
            lo: 0.4,
            union: false,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(Error::Config(format!(
                "soft mining thresholds need 0 <= lo < hi <= 1, got lo={} hi={}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub margin: f64,
    pub semantics: LossSemantics,
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            semantics: LossSemantics::Corrected,
            epochs: 200,
            learning_rate: 1e-3,
            hidden: 32,
            seed: 0,
        }
    }
}

/// Anchor that soft mining could not complete.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedAnchor {
    pub anchor: usize,
    pub reason: String,
}

fn check_features(d: usize) -> Result<()> {
    if d < 3 {
        return Err(Error::TooFewSamples(format!(
            "triplet mining needs 3 features, got {d}"
        )));
    }
    Ok(())
}

/// One triplet per anchor from the raw-space cosine matrix: the most similar
/// other feature as positive, the least similar as negative.
pub fn mine_hard(anchors: &[usize], sims: &[Vec<f64>], names: &[String]) -> Result<Vec<Triplet>> {
    let d = sims.len();
    check_features(d)?;
    let mut out = Vec::with_capacity(anchors.len());
    for &a in anchors {
        if a >= d {
            return Err(Error::UnknownFeature(a.to_string()));
        }
        let mut cands: Vec<usize> = (0..d).filter(|&j| j != a).collect();
        cands.sort_by(|&x, &y| names[x].cmp(&names[y]));
        let by = |better: fn(f64, f64) -> bool| {
            cands
                .iter()
                .copied()
                .reduce(|best, j| {
                    if better(sims[a][j], sims[a][best]) {
                        j
                    } else {
                        best
                    }
                })
                .unwrap()
        };
        let positive = by(|x, y| x > y);
        let mut negative = by(|x, y| x < y);
        if positive == negative {
            // every candidate ties; fall back to the next name
            negative = cands.iter().copied().find(|&j| j != positive).unwrap();
        }
        out.push(Triplet {
            anchor: a,
            positive,
            negative,
        });
    }
    Ok(out)
}

pub fn mine_hard_from_centroids(
    anchors: &[usize],
    centroids: &[Vec<f64>],
    names: &[String],
) -> Result<Vec<Triplet>> {
    mine_hard(anchors, &similarity_matrix(centroids)?, names)
}

/// Positive and negative drawn at random from threshold-defined candidate
/// sets comparing the raw (`sims_raw`) and compressed (`sims_comp`) spaces.
pub fn mine_soft(
    anchors: &[usize],
    sims_raw: &[Vec<f64>],
    sims_comp: &[Vec<f64>],
    cfg: &MiningConfig,
) -> Result<(Vec<Triplet>, Vec<SkippedAnchor>)> {
    cfg.validate()?;
    let d = sims_raw.len();
    check_features(d)?;
    if sims_comp.len() != d {
        return Err(Error::Dataset(
            "similarity matrices cover different features".into(),
        ));
    }
    let combine = |x: bool, y: bool| if cfg.union { x || y } else { x && y };
    let mut triplets = Vec::new();
    let mut skipped = Vec::new();
    for &a in anchors {
        if a >= d {
            return Err(Error::UnknownFeature(a.to_string()));
        }
        let pos: Vec<usize> = (0..d)
            .filter(|&j| j != a && combine(sims_raw[a][j] > cfg.hi, sims_comp[a][j] < cfg.lo))
            .collect();
        let neg: Vec<usize> = (0..d)
            .filter(|&j| j != a && combine(sims_raw[a][j] < cfg.lo, sims_comp[a][j] > cfg.hi))
            .collect();
        let mut rng = seeded(cfg.seed, a as u64);
        if pos.is_empty() {
            skipped.push(SkippedAnchor {
                anchor: a,
                reason: "no positive candidate".into(),
            });
            continue;
        }
        let positive = pos[rng.gen_range(0..pos.len())];
        let neg: Vec<usize> = neg.into_iter().filter(|&j| j != positive).collect();
        if neg.is_empty() {
            skipped.push(SkippedAnchor {
                anchor: a,
                reason: "no negative candidate".into(),
            });
            continue;
        }
        let negative = neg[rng.gen_range(0..neg.len())];
        triplets.push(Triplet {
            anchor: a,
            positive,
            negative,
        });
    }
    for s in &skipped {
        warn!("soft mining skipped anchor {}: {}", s.anchor, s.reason);
    }
    Ok((triplets, skipped))
}

pub fn write_triplets_csv<W: Write>(
    out: W,
    triplets: &[Triplet],
    names: &[String],
    mode: MiningMode,
) -> Result<()> {
    let mode = match mode {
        MiningMode::Hard => "hard",
        MiningMode::Soft => "soft",
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["anchor", "positive", "negative", "mode"])?;
    for t in triplets {
        w.write_record([
            &names[t.anchor],
            &names[t.positive],
            &names[t.negative],
            mode,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads triplets written by [`write_triplets_csv`], resolving feature
/// names against `names`.
pub fn read_triplets_csv<R: std::io::Read>(input: R, names: &[String]) -> Result<Vec<Triplet>> {
    let index = |n: &str| {
        names
            .iter()
            .position(|x| x == n)
            .ok_or_else(|| Error::UnknownFeature(n.to_string()))
    };
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Dataset(
                "triplet row needs anchor, positive and negative".into(),
            ));
        }
        out.push(Triplet {
            anchor: index(&rec[0])?,
            positive: index(&rec[1])?,
            negative: index(&rec[2])?,
        });
    }
    Ok(out)
}

/// Two-layer projection head `width → hidden (relu) → width`.
#[derive(Debug, Clone)]
pub struct ProjectionModel {
    params: ParamStore,
    mlp: Mlp,
}

impl ProjectionModel {
    pub fn new(width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, 0x7E00);
        let mut params = ParamStore::new();
        let mlp = Mlp::new(
            &mut params,
            "projection",
            &[width, hidden, width],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        );
        Self { params, mlp }
    }

    pub fn width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.width() {
            return Err(Error::Dimension {
                expected: self.width(),
                got: x.cols(),
            });
        }
        Ok(self.mlp.apply(&self.params, x)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn load(path: &std::path::Path, width: usize, hidden: usize) -> Result<Self> {
        let mut m = Self::new(width, hidden, 0);
        m.params.load(path)?;
        Ok(m)
    }

    fn loss(
        &self,
        g: &mut Graph,
        c: &Tensor,
        triplets: &[Triplet],
        cfg: &FinetuneConfig,
    ) -> piiscan_autograd::Result<piiscan_autograd::Var> {
        let x = g.input(c.clone())?;
        let p = self.mlp.forward(g, &self.params, x)?;
        let ia: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
        let ip: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
        let inn: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
        let a = g.gather_rows(p, &ia)?;
        let pp = g.gather_rows(p, &ip)?;
        let n = g.gather_rows(p, &inn)?;
        g.triplet_cosine(a, pp, n, cfg.margin, cfg.semantics.into())
    }
}

fn centroid_matrix(centroids: &[Vec<f64>]) -> Result<Tensor> {
    let w = centroids.first().map_or(0, Vec::len);
    Ok(Tensor::from_matrix(centroids.len(), w, centroids.concat())?)
}

/// Number of triplets with a positive hinge after projection.
pub fn count_violations(
    model: &ProjectionModel,
    triplets: &[Triplet],
    centroids: &[Vec<f64>],
    margin: f64,
    semantics: LossSemantics,
) -> Result<usize> {
    let p = model.apply(&centroid_matrix(centroids)?)?;
    let mut n = 0;
    for t in triplets {
        let cp = cosine(p.row_slice(t.anchor), p.row_slice(t.positive))?;
        let cn = cosine(p.row_slice(t.anchor), p.row_slice(t.negative))?;
        if triplet_hinge(cp, cn, margin, semantics.into()) > 0.0 {
            n += 1;
        }
    }
    Ok(n)
}

/// Full-batch training of the projection head on compressed centroids.
/// Returns the mean triplet loss before training and after each epoch.
pub fn train_triplet(
    model: &mut ProjectionModel,
    triplets: &[Triplet],
    centroids: &[Vec<f64>],
    cfg: &FinetuneConfig,
    optimizer: Optimizer,
) -> Result<Vec<f64>> {
    if triplets.is_empty() {
        return Err(Error::EmptyInput(
            "triplet training needs at least one triplet",
        ));
    }
    let d = centroids.len();
    if triplets
        .iter()
        .any(|t| t.anchor >= d || t.positive >= d || t.negative >= d)
    {
        return Err(Error::UnknownFeature(
            "triplet refers to a missing feature".into(),
        ));
    }
    let c = centroid_matrix(centroids)?;
    let mut opt = optimizer;
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let mut g = Graph::new(cfg.seed);
        let loss = model
            .loss(&mut g, &c, triplets, cfg)
            .map_err(|_| Error::NonFiniteLoss(epoch))?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        losses.push(lv);
        if epoch == cfg.epochs {
            break;
        }
        let grads = g.backward(loss).map_err(|_| Error::NonFiniteLoss(epoch))?;
        opt.step(&mut model.params, &grads);
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementStrategy {
    SelectedOnly,
    AllFeatures,
}

pub fn apply_replacement(
    store: &EmbeddingStore,
    model: &ProjectionModel,
    selected: &[usize],
    strategy: ReplacementStrategy,
) -> Result<EmbeddingStore> {
    let d = store.n_features();
    if let Some(&bad) = selected.iter().find(|&&j| j >= d) {
        return Err(Error::UnknownFeature(bad.to_string()));
    }
    let mask: Vec<bool> = match strategy {
        ReplacementStrategy::AllFeatures => vec![true; d],
        ReplacementStrategy::SelectedOnly => (0..d).map(|j| selected.contains(&j)).collect(),
    };
    store.transform(&mask, store.dim(), |block, m| {
        if m == 0 {
            return Ok(Vec::new());
        }
        let x = Tensor::from_matrix(m, store.dim(), block.to_vec())?;
        Ok(model.apply(&x)?.into_data())
    })
}

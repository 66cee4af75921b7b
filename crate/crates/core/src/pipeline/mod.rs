//! Stage orchestration over a working directory. Every stage reads the
//! artifacts of earlier stages, writes its own and records a manifest with
//! content hashes of both.

pub mod config;
pub mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use piiscan_autograd::Optimizer;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_ae, training_matrix};
use crate::classifier::{
    cross_validate_with_model, evaluate, EvalMode, EvalReport, MlpModel, SplitMetrics,
};
use crate::embed::{build_store, EmbeddingStore, Provider};
use crate::error::{Error, Result};
use crate::flow::parse_flow_stream;
use crate::ft::{train_ft, write_epochs_csv};
use crate::ifcs::{
    report_from_centroids, select_features, similarity_matrix, Metric, SelectionRule,
};
use crate::pca::{fit_pca, flatten, kneedle_elbow, Knee, Matrix, Standardizer};
use crate::prep::{
    balance_classes, binarize_labels, domain_stats, kfold_split, observed_types, select_domains,
};
use crate::prep::{BalanceConfig, FoldSplit, LabelMode};
use crate::synth::{generate, write_corpus};
use crate::table::{
    drop_constant_features, read_dataset, sidecar_path, tabularize, write_dataset, TabularDataset,
};
use crate::triplet::{
    apply_replacement, count_violations, mine_hard, mine_soft, read_triplets_csv, train_triplet,
    write_triplets_csv, MiningMode, ProjectionModel, ReplacementStrategy,
};

pub use config::PipelineConfig;
pub use manifest::{audit, FileHash, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Synth,
    Ingest,
    Prep,
    Embed,
    Compress,
    Ifcs,
    Mine,
    Finetune,
    Reduce,
    Train,
    Evaluate,
    Ft,
    DumpEmbeddings,
    Sweep,
}

impl Stage {
    /// The stages `pipeline` runs, in order, after corpus generation.
    pub const CHAIN: [Stage; 10] = [
        Stage::Ingest,
        Stage::Prep,
        Stage::Embed,
        Stage::Compress,
        Stage::Ifcs,
        Stage::Mine,
        Stage::Finetune,
        Stage::Reduce,
        Stage::Train,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Prep => "prep",
            Stage::Embed => "embed",
            Stage::Compress => "compress",
            Stage::Ifcs => "ifcs",
            Stage::Mine => "mine",
            Stage::Finetune => "finetune",
            Stage::Reduce => "reduce",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Ft => "ft",
            Stage::DumpEmbeddings => "dump-embeddings",
            Stage::Sweep => "sweep",
        }
    }

    /// Process exit code for a failure inside this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Synth => 10,
            Stage::Ingest => 11,
            Stage::Prep => 12,
            Stage::Embed => 13,
            Stage::Compress => 14,
            Stage::Ifcs => 15,
            Stage::Mine => 16,
            Stage::Finetune => 17,
            Stage::Reduce => 18,
            Stage::Train => 19,
            Stage::Evaluate => 20,
            Stage::Ft => 21,
            Stage::DumpEmbeddings => 22,
            Stage::Sweep => 23,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;

#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self.source {
            Error::Config(_) => EXIT_CONFIG,
            Error::MissingInput { .. } => EXIT_MISSING_INPUT,
            _ => self.stage.exit_code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Corpus,
    Dataset,
    Balanced,
    Folds,
    RawStore,
    AeCheckpoint,
    AeCurve,
    CompressedStore,
    IfcsReport,
    Selection,
    Triplets,
    Projection,
    FinetuneLoss,
    FinetuneSummary,
    FinetunedStore,
    Reduced,
    Scree,
    ReduceSummary,
    Metrics,
    ReportText,
    PerLabel,
    Model,
    Evaluation,
    FtEpochs,
    FtModel,
    FtReport,
}

impl Artifact {
    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::Corpus => "corpus.jsonl",
            Artifact::Dataset => "dataset.csv",
            Artifact::Balanced => "balanced.csv",
            Artifact::Folds => "folds.csv",
            Artifact::RawStore => "raw.store",
            Artifact::AeCheckpoint => "autoencoder.ckpt",
            Artifact::AeCurve => "autoencoder_curve.csv",
            Artifact::CompressedStore => "compressed.store",
            Artifact::IfcsReport => "ifcs.csv",
            Artifact::Selection => "selection.json",
            Artifact::Triplets => "triplets.csv",
            Artifact::Projection => "projection.ckpt",
            Artifact::FinetuneLoss => "finetune_loss.csv",
            Artifact::FinetuneSummary => "finetune.json",
            Artifact::FinetunedStore => "finetuned.store",
            Artifact::Reduced => "reduced.csv",
            Artifact::Scree => "scree.csv",
            Artifact::ReduceSummary => "reduce.json",
            Artifact::Metrics => "metrics.json",
            Artifact::ReportText => "report.txt",
            Artifact::PerLabel => "per_label.csv",
            Artifact::Model => "model.ckpt",
            Artifact::Evaluation => "evaluation.json",
            Artifact::FtEpochs => "ft_epochs.csv",
            Artifact::FtModel => "ft.ckpt",
            Artifact::FtReport => "ft_report.json",
        }
    }

    /// Name used in missing-input errors.
    pub fn what(self) -> &'static str {
        match self {
            Artifact::Corpus => "flow corpus",
            Artifact::Dataset => "dataset",
            Artifact::Balanced => "balanced dataset",
            Artifact::Folds => "fold assignment",
            Artifact::RawStore => "raw embedding store",
            Artifact::CompressedStore => "compressed store",
            Artifact::Selection => "feature selection",
            Artifact::Triplets => "triplets",
            Artifact::FinetunedStore => "fine-tuned store",
            Artifact::Reduced => "reduced features",
            Artifact::Model => "classifier checkpoint",
            _ => self.file_name(),
        }
    }

    /// Artifacts up to compression are shared by every run of a sweep.
    pub fn shared(self) -> bool {
        matches!(
            self,
            Artifact::Corpus
                | Artifact::Dataset
                | Artifact::Balanced
                | Artifact::Folds
                | Artifact::RawStore
                | Artifact::AeCheckpoint
                | Artifact::AeCurve
                | Artifact::CompressedStore
        )
    }
}

/// Where artifacts live. A plain run uses one directory for both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub shared: PathBuf,
    pub run: PathBuf,
}

impl Layout {
    pub fn single(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Self {
            shared: dir.clone(),
            run: dir,
        }
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        let dir = if a.shared() { &self.shared } else { &self.run };
        dir.join(a.file_name())
    }

    fn dir_for(&self, stage: Stage) -> &Path {
        match stage {
            Stage::Synth | Stage::Ingest | Stage::Prep | Stage::Embed | Stage::Compress => {
                &self.shared
            }
            _ => &self.run,
        }
    }
}

/// Stage inputs and outputs collected for the manifest.
struct StageRun<'a> {
    stage: Stage,
    layout: &'a Layout,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> StageRun<'a> {
    fn new(stage: Stage, layout: &'a Layout) -> Result<Self> {
        std::fs::create_dir_all(layout.dir_for(stage))?;
        Ok(Self {
            stage,
            layout,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn require_path(&mut self, path: PathBuf, what: &str) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Error::MissingInput {
                what: what.to_string(),
                path,
            });
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn input(&mut self, a: Artifact) -> Result<PathBuf> {
        self.require_path(self.layout.path(a), a.what())
    }

    fn dataset(&mut self, a: Artifact) -> Result<TabularDataset> {
        let p = self.input(a)?;
        self.require_path(sidecar_path(&p), a.what())?;
        read_dataset(&p)
    }

    fn store(&mut self, a: Artifact) -> Result<EmbeddingStore> {
        EmbeddingStore::load(&self.input(a)?)
    }

    fn folds(&mut self) -> Result<FoldSplit> {
        FoldSplit::read_csv(BufReader::new(File::open(self.input(Artifact::Folds)?)?))
    }

    fn output(&mut self, a: Artifact) -> PathBuf {
        let p = self.layout.path(a);
        self.outputs.push(p.clone());
        p
    }

    fn writer(&mut self, a: Artifact) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.output(a))?))
    }

    fn json<T: Serialize>(&mut self, a: Artifact, value: &T) -> Result<()> {
        let mut w = self.writer(a)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn finish(self, cfg: &PipelineConfig) -> Result<Manifest> {
        let hash_all = |paths: &[PathBuf]| {
            paths
                .iter()
                .map(|p| FileHash::of(p))
                .collect::<Result<Vec<_>>>()
        };
        let m = Manifest {
            stage: self.stage.name().to_string(),
            seed: cfg.seed,
            config_hash: config_hash(cfg, self.stage)?,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            elapsed_ms: self.started.elapsed().as_millis() as u64,
        };
        m.save(&Manifest::path_for(
            self.layout.dir_for(self.stage),
            self.stage.name(),
        ))?;
        info!("{} done in {} ms", self.stage, m.elapsed_ms);
        Ok(m)
    }
}

/// Hash of the configuration sections a stage reads.
pub fn config_hash(cfg: &PipelineConfig, stage: Stage) -> Result<String> {
    use serde_json::json;
    let view = match stage {
        Stage::Synth => json!({ "synth": cfg.synth }),
        Stage::Ingest => json!({ "ingest": cfg.ingest }),
        Stage::Prep => json!({ "prep": cfg.prep, "seed": cfg.seed }),
        Stage::Embed => json!({ "embed": cfg.embed }),
        Stage::Compress => json!({ "autoencoder": cfg.autoencoder }),
        Stage::Ifcs => json!({ "ifcs": cfg.ifcs }),
        Stage::Mine => json!({ "mining": cfg.mining }),
        Stage::Finetune => json!({ "finetune": cfg.finetune, "replacement": cfg.replacement }),
        Stage::Reduce => json!({ "reduce": cfg.reduce }),
        Stage::Train | Stage::Evaluate => json!({ "classifier": cfg.classifier }),
        Stage::Ft => json!({ "ft": cfg.ft }),
        Stage::DumpEmbeddings => json!({}),
        Stage::Sweep => json!({ "sweep": cfg.sweep }),
    };
    Ok(manifest::sha256_bytes(&serde_json::to_vec(&view)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub metric: Metric,
    pub rule: SelectionRule,
    pub indices: Vec<usize>,
    pub features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub triplets: usize,
    pub violations_before: usize,
    pub violations_after: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceSummary {
    pub pca: bool,
    pub input_width: usize,
    pub output_width: usize,
    pub knee: Option<Knee>,
    pub cumulative_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub label_names: Vec<String>,
    pub test: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtReport {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

fn stage_synth(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Synth, layout)?;
    let records = generate(&cfg.synth)?;
    let w = run.writer(Artifact::Corpus)?;
    write_corpus(&records, w)?;
    run.finish(cfg)?;
    Ok(())
}

fn stage_ingest(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Ingest, layout)?;
    let src = match &cfg.corpus {
        Some(p) => run.require_path(p.clone(), Artifact::Corpus.what())?,
        None => run.input(Artifact::Corpus)?,
    };
    let mut records = parse_flow_stream(BufReader::new(File::open(&src)?))?;
    if records.is_empty() {
        return Err(Error::EmptyInput("flow corpus has no records"));
    }
    if cfg.ingest.select_domains {
        let stats = domain_stats(&records);
        let keep = select_domains(
            &stats,
            cfg.ingest.word_count_threshold,
            cfg.ingest.literal_total,
        );
        records.retain(|r| keep.contains(&r.domain));
        info!(
            "domain selection kept {} of {} domains",
            keep.len(),
            stats.len()
        );
        if records.is_empty() {
            return Err(Error::EmptyInput("domain selection removed every record"));
        }
    }
    let ds = drop_constant_features(&tabularize(&records)?)?;
    let out = run.output(Artifact::Dataset);
    write_dataset(&ds, &out)?;
    run.outputs.push(sidecar_path(&out));
    run.finish(cfg)?;
    Ok(())
}

fn stage_prep(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Prep, layout)?;
    let ds = run.dataset(Artifact::Dataset)?;
    let ds = if cfg.prep.balance {
        let bc = BalanceConfig {
            folds: cfg.prep.folds,
            aggressive_threshold: cfg.prep.aggressive_threshold,
            seed: cfg.seed,
        };
        balance_classes(&ds, &bc)?
    } else {
        ds
    };
    let split = kfold_split(
        ds.labels(),
        cfg.prep.folds,
        cfg.prep.test_fraction,
        cfg.seed,
    )?;
    let out = run.output(Artifact::Balanced);
    write_dataset(&ds, &out)?;
    run.outputs.push(sidecar_path(&out));
    let w = run.writer(Artifact::Folds)?;
    split.write_csv(w)?;
    run.finish(cfg)?;
    Ok(())
}

fn stage_embed(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Embed, layout)?;
    let ds = run.dataset(Artifact::Balanced)?;
    let provider = Provider::from_config(&cfg.embed.provider)?;
    let store = build_store(&ds, &provider, cfg.embed.centroids)?;
    store.save(&run.output(Artifact::RawStore))?;
    run.finish(cfg)?;
    Ok(())
}

fn stage_compress(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Compress, layout)?;
    let raw = run.store(Artifact::RawStore)?;
    let x = training_matrix(&raw, &cfg.autoencoder)?;
    let ae = train_ae(&x, &cfg.autoencoder)?;
    ae.save(&run.output(Artifact::AeCheckpoint))?;
    let w = run.writer(Artifact::AeCurve)?;
    ae.write_curve_csv(w)?;
    ae.compress_store(&raw)?
        .save(&run.output(Artifact::CompressedStore))?;
    run.finish(cfg)?;
    Ok(())
}

fn stage_ifcs(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Ifcs, layout)?;
    let comp = run.store(Artifact::CompressedStore)?;
    let raw = run.store(Artifact::RawStore)?;
    let names = raw.feature_names().to_vec();
    let report = report_from_centroids(&names, &raw.centroids(), &comp.centroids())?;
    let rule = cfg.ifcs.selection;
    let sel_wd = select_features(&report, Metric::Wd, rule)?;
    let sel_kl = select_features(&report, Metric::Kl, rule)?;
    let w = run.writer(Artifact::IfcsReport)?;
    report.write_csv(w, &sel_wd, &sel_kl)?;
    let indices = match cfg.ifcs.metric {
        Metric::Wd => sel_wd,
        Metric::Kl => sel_kl,
    };
    let selection = Selection {
        metric: cfg.ifcs.metric,
        rule,
        features: indices.iter().map(|&j| names[j].clone()).collect(),
        indices,
    };
    run.json(Artifact::Selection, &selection)?;
    run.finish(cfg)?;
    Ok(())
}

fn read_selection(run: &mut StageRun<'_>) -> Result<Selection> {
    let p = run.input(Artifact::Selection)?;
    Ok(serde_json::from_slice(&std::fs::read(p)?)?)
}

fn stage_mine(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Mine, layout)?;
    let raw = run.store(Artifact::RawStore)?;
    let selection = read_selection(&mut run)?;
    let names = raw.feature_names().to_vec();
    let sims_raw = similarity_matrix(&raw.centroids())?;
    let triplets = match cfg.mining.mode {
        MiningMode::Hard => mine_hard(&selection.indices, &sims_raw, &names)?,
        MiningMode::Soft => {
            let comp = run.store(Artifact::CompressedStore)?;
            let sims_comp = similarity_matrix(&comp.centroids())?;
            mine_soft(&selection.indices, &sims_raw, &sims_comp, &cfg.mining)?.0
        }
    };
    let w = run.writer(Artifact::Triplets)?;
    write_triplets_csv(w, &triplets, &names, cfg.mining.mode)?;
    run.finish(cfg)?;
    Ok(())
}

fn stage_finetune(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Finetune, layout)?;
    let comp = run.store(Artifact::CompressedStore)?;
    let selection = read_selection(&mut run)?;
    let tp = run.input(Artifact::Triplets)?;
    let triplets = read_triplets_csv(BufReader::new(File::open(tp)?), comp.feature_names())?;
    let ft = &cfg.finetune;
    let centroids = comp.centroids();
    let mut model = ProjectionModel::new(comp.dim(), ft.hidden, ft.seed);
    let (before, losses, after) = if triplets.is_empty() {
        (0, Vec::new(), 0)
    } else {
        let before = count_violations(&model, &triplets, &centroids, ft.margin, ft.semantics)?;
        let losses = train_triplet(
            &mut model,
            &triplets,
            &centroids,
            ft,
            Optimizer::adam(ft.learning_rate),
        )?;
        let after = count_violations(&model, &triplets, &centroids, ft.margin, ft.semantics)?;
        (before, losses, after)
    };
    model.save(&run.output(Artifact::Projection))?;
    let mut w = csv::Writer::from_writer(run.writer(Artifact::FinetuneLoss)?);
    w.write_record(["epoch", "loss"])?;
    for (e, l) in losses.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    drop(w);
    let summary = FinetuneSummary {
        triplets: triplets.len(),
        violations_before: before,
        violations_after: after,
        loss_before: losses.first().copied().unwrap_or(0.0),
        loss_after: losses.last().copied().unwrap_or(0.0),
    };
    run.json(Artifact::FinetuneSummary, &summary)?;
    let replaced = if triplets.is_empty() {
        // nothing was learnt, so the projection is left out
        comp
    } else {
        apply_replacement(&comp, &model, &selection.indices, cfg.replacement.strategy)?
    };
    replaced.save(&run.output(Artifact::FinetunedStore))?;
    run.finish(cfg)?;
    Ok(())
}

fn stage_reduce(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let mut run = StageRun::new(Stage::Reduce, layout)?;
    let store = run.store(Artifact::FinetunedStore)?;
    let split = run.folds()?;
    if split.pool().last().is_some_and(|&i| i >= store.n_samples()) {
        return Err(Error::Dataset(
            "fold assignment does not match the store".into(),
        ));
    }
    let x = flatten(&store);
    let pool = split.pool();
    let st = Standardizer::fit(&x.select_rows(&pool))?;
    let xs = st.transform(&x)?;
    let (z, summary) = if cfg.reduce.pca {
        let pca = fit_pca(&xs.select_rows(&pool))?;
        let (n_c, knee) = match cfg.reduce.n_components {
            Some(n) => (n.min(pca.n_components), None),
            None => {
                let knee = kneedle_elbow(&pca.explained_ratio)?;
                (knee.n_components, Some(knee))
            }
        };
        let w = run.writer(Artifact::Scree)?;
        pca.write_scree_csv(w, Some(n_c))?;
        let summary = ReduceSummary {
            pca: true,
            input_width: xs.cols,
            output_width: n_c,
            knee,
            cumulative_ratio: Some(pca.explained_ratio[..n_c].iter().sum()),
        };
        (pca.project(&xs, n_c)?, summary)
    } else {
        let summary = ReduceSummary {
            pca: false,
            input_width: xs.cols,
            output_width: xs.cols,
            knee: None,
            cumulative_ratio: None,
        };
        (xs, summary)
    };
    let w = run.writer(Artifact::Reduced)?;
    z.write_csv(w)?;
    run.json(Artifact::ReduceSummary, &summary)?;
    run.finish(cfg)?;
    Ok(())
}

/// Targets, their names and the sample rows they cover for an evaluation
/// mode. Leak-only evaluation drops samples without any type.
pub fn targets(ds: &TabularDataset, mode: EvalMode) -> Result<(Matrix, Vec<String>, Vec<usize>)> {
    match mode {
        EvalMode::Binary => {
            let y: Vec<f64> = ds.labels().iter().map(|&l| l as u8 as f64).collect();
            Ok((
                Matrix::new(y.len(), 1, y)?,
                vec!["leak".to_string()],
                (0..ds.n_samples()).collect(),
            ))
        }
        EvalMode::LeakOnly | EvalMode::Combined => {
            let universe = observed_types(ds.pii_types());
            if universe.is_empty() {
                return Err(Error::EmptyInput("no PII types to classify"));
            }
            let lm_mode = if mode == EvalMode::LeakOnly {
                LabelMode::LeakOnly
            } else {
                LabelMode::Combined
            };
            let lm = binarize_labels(ds.pii_types(), &universe, lm_mode)?;
            let y = Matrix::new(lm.n_rows(), lm.n_types(), lm.as_f64())?;
            Ok((y, lm.type_names, lm.rows))
        }
    }
}

struct TrainInputs {
    x: Matrix,
    y: Matrix,
    names: Vec<String>,
    split: FoldSplit,
}

fn train_inputs(run: &mut StageRun<'_>, mode: EvalMode) -> Result<TrainInputs> {
    let rp = run.input(Artifact::Reduced)?;
    let x = Matrix::read_csv(BufReader::new(File::open(rp)?))?;
    let ds = run.dataset(Artifact::Balanced)?;
    let split = run.folds()?;
    if x.rows != ds.n_samples() {
        return Err(Error::Dimension {
            expected: ds.n_samples(),
            got: x.rows,
        });
    }
    let (y, names, rows) = targets(&ds, mode)?;
    Ok(TrainInputs {
        x: x.select_rows(&rows),
        y,
        names,
        split: split.restrict(&rows),
    })
}

fn stage_train(cfg: &PipelineConfig, layout: &Layout) -> Result<EvalReport> {
    let mut run = StageRun::new(Stage::Train, layout)?;
    let mode = cfg.classifier.mode;
    let t = train_inputs(&mut run, mode)?;
    let (report, model) =
        cross_validate_with_model(&t.x, &t.y, &t.split, mode, &t.names, &cfg.classifier.mlp)?;
    model.save(&run.output(Artifact::Model))?;
    let mut w = run.writer(Artifact::Metrics)?;
    w.write_all(report.to_json()?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut w = run.writer(Artifact::ReportText)?;
    w.write_all(report.to_text().as_bytes())?;
    w.flush()?;
    let w = run.writer(Artifact::PerLabel)?;
    report.write_per_label_csv(w)?;
    run.finish(cfg)?;
    Ok(report)
}

fn stage_evaluate(cfg: &PipelineConfig, layout: &Layout) -> Result<Evaluation> {
    let mut run = StageRun::new(Stage::Evaluate, layout)?;
    let mode = cfg.classifier.mode;
    let t = train_inputs(&mut run, mode)?;
    let mp = run.input(Artifact::Model)?;
    let model = MlpModel::load(&mp, t.x.cols, t.y.cols, &cfg.classifier.mlp)?;
    let test = &t.split.test_indices;
    let eval = Evaluation {
        mode,
        label_names: t.names,
        test: evaluate(&model, &t.x.select_rows(test), &t.y.select_rows(test))?,
    };
    run.json(Artifact::Evaluation, &eval)?;
    run.finish(cfg)?;
    Ok(eval)
}

/// Transformer baseline on the balanced table: trained on all folds but the
/// first, validated on the first and scored on the test set.
fn stage_ft(cfg: &PipelineConfig, layout: &Layout) -> Result<FtReport> {
    let mut run = StageRun::new(Stage::Ft, layout)?;
    let ds = run.dataset(Artifact::Balanced)?;
    let split = run.folds()?;
    let train = split.train_indices(0);
    let out = train_ft(&ds, &train, Some(&split.fold_indices[0]), &cfg.ft)?;
    let test = out.model.tokenizer.batch(&ds, &split.test_indices)?;
    let labels: Vec<bool> = split.test_indices.iter().map(|&i| ds.labels()[i]).collect();
    let report = FtReport {
        best_epoch: out.best_epoch,
        epochs_run: out.history.len(),
        val_accuracy: out.history[out.best_epoch - 1].val_acc.unwrap_or(0.0),
        test_accuracy: out.model.accuracy(&test, &labels)?,
    };
    let w = run.writer(Artifact::FtEpochs)?;
    write_epochs_csv(&out.history, w)?;
    out.model.save(&run.output(Artifact::FtModel))?;
    run.json(Artifact::FtReport, &report)?;
    run.finish(cfg)?;
    Ok(report)
}

/// Which store `dump-embeddings` reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Raw,
    Compressed,
    Finetuned,
}

impl StoreKind {
    pub fn artifact(self) -> Artifact {
        match self {
            StoreKind::Raw => Artifact::RawStore,
            StoreKind::Compressed => Artifact::CompressedStore,
            StoreKind::Finetuned => Artifact::FinetunedStore,
        }
    }
}

/// Per-feature centroids as CSV rows `feature, c0, c1, ...`.
pub fn write_centroids_csv<W: Write>(store: &EmbeddingStore, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["feature".to_string()];
    header.extend((0..store.dim()).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for (j, name) in store.feature_names().iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(store.centroid(j).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn dump_embeddings(
    cfg: &PipelineConfig,
    layout: &Layout,
    kind: StoreKind,
    out: &Path,
) -> std::result::Result<(), StageError> {
    let cfg = cfg.resolved();
    let stage = Stage::DumpEmbeddings;
    let wrap = |source| StageError { stage, source };
    (|| -> Result<()> {
        let mut run = StageRun::new(stage, layout)?;
        let store = run.store(kind.artifact())?;
        write_centroids_csv(&store, BufWriter::new(File::create(out)?))?;
        run.outputs.push(out.to_path_buf());
        run.finish(&cfg)?;
        Ok(())
    })()
    .map_err(wrap)
}

/// Runs one stage. The config's master seed is applied to every section
/// first.
pub fn run_stage(
    stage: Stage,
    cfg: &PipelineConfig,
    layout: &Layout,
) -> std::result::Result<(), StageError> {
    let cfg = cfg.resolved();
    let r = match stage {
        Stage::Synth => stage_synth(&cfg, layout),
        Stage::Ingest => stage_ingest(&cfg, layout),
        Stage::Prep => stage_prep(&cfg, layout),
        Stage::Embed => stage_embed(&cfg, layout),
        Stage::Compress => stage_compress(&cfg, layout),
        Stage::Ifcs => stage_ifcs(&cfg, layout),
        Stage::Mine => stage_mine(&cfg, layout),
        Stage::Finetune => stage_finetune(&cfg, layout),
        Stage::Reduce => stage_reduce(&cfg, layout),
        Stage::Train => stage_train(&cfg, layout).map(|_| ()),
        Stage::Evaluate => stage_evaluate(&cfg, layout).map(|_| ()),
        Stage::Ft => stage_ft(&cfg, layout).map(|_| ()),
        Stage::DumpEmbeddings | Stage::Sweep => Err(Error::Config(format!(
            "{stage} is not a single pipeline stage"
        ))),
    };
    r.map_err(|source| StageError { stage, source })
}

/// Generates the corpus when none is configured, then runs every stage in
/// order and returns the cross-validation report.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    layout: &Layout,
) -> std::result::Result<EvalReport, StageError> {
    run_prefix(cfg, layout)?;
    run_suffix(cfg, layout)
}

fn run_prefix(cfg: &PipelineConfig, layout: &Layout) -> std::result::Result<(), StageError> {
    if cfg.corpus.is_none() {
        run_stage(Stage::Synth, cfg, layout)?;
    }
    for stage in &Stage::CHAIN[..4] {
        run_stage(*stage, cfg, layout)?;
    }
    Ok(())
}

fn run_suffix(
    cfg: &PipelineConfig,
    layout: &Layout,
) -> std::result::Result<EvalReport, StageError> {
    for stage in &Stage::CHAIN[4..8] {
        run_stage(*stage, cfg, layout)?;
    }
    let resolved = cfg.resolved();
    let report = stage_train(&resolved, layout).map_err(|source| StageError {
        stage: Stage::Train,
        source,
    })?;
    run_stage(Stage::Evaluate, cfg, layout)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub metric: Metric,
    pub mining: MiningMode,
    pub strategy: ReplacementStrategy,
    pub pca: bool,
    pub mean_val_accuracy: f64,
    pub mean_val_f1: f64,
    pub test_accuracy: f64,
    pub test_f1: f64,
}

fn tag<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Runs the ablation grid under `root`: the stages up to compression once in
/// `root/shared`, then every combination in `root/sweep/<name>`. Writes
/// `root/sweep.csv`.
pub fn run_sweep(
    cfg: &PipelineConfig,
    root: &Path,
) -> std::result::Result<Vec<SweepRow>, StageError> {
    let wrap = |source| StageError {
        stage: Stage::Sweep,
        source,
    };
    let shared = root.join("shared");
    run_prefix(cfg, &Layout::single(&shared))?;
    let s = &cfg.sweep;
    let mut rows = Vec::new();
    for &metric in &s.metrics {
        for &mining in &s.mining {
            for &strategy in &s.strategies {
                for &pca in &s.pca {
                    let name = format!(
                        "{}-{}-{}-{}",
                        tag(&metric),
                        tag(&mining),
                        tag(&strategy),
                        if pca { "pca" } else { "nopca" }
                    );
                    let mut c = cfg.clone();
                    c.ifcs.metric = metric;
                    c.mining.mode = mining;
                    c.replacement.strategy = strategy;
                    c.reduce.pca = pca;
                    let layout = Layout {
                        shared: shared.clone(),
                        run: root.join("sweep").join(&name),
                    };
                    info!("sweep run {name}");
                    let report = run_suffix(&c, &layout)?;
                    rows.push(SweepRow {
                        name,
                        metric,
                        mining,
                        strategy,
                        pca,
                        mean_val_accuracy: report.mean_val.accuracy,
                        mean_val_f1: report.mean_val.f1,
                        test_accuracy: report.test.accuracy,
                        test_f1: report.test.f1,
                    });
                }
            }
        }
    }
    (|| -> Result<()> {
        let mut w = csv::Writer::from_path(root.join("sweep.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })()
    .map_err(wrap)?;
    Ok(rows)
}

pub fn load_report(layout: &Layout) -> Result<EvalReport> {
    let p = layout.path(Artifact::Metrics);
    if !p.is_file() {
        return Err(Error::MissingInput {
            what: Artifact::Metrics.what().into(),
            path: p,
        });
    }
    Ok(serde_json::from_slice(&std::fs::read(p)?)?)
}

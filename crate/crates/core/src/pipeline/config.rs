use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeConfig;
use crate::classifier::{EvalMode, MlpConfig};
use crate::embed::{CentroidMode, ProviderConfig};
use crate::error::{Error, Result};
use crate::ft::FtConfig;
use crate::ifcs::{Metric, SelectionRule};
use crate::prep::domain::DEFAULT_WORD_COUNT_THRESHOLD;
use crate::synth::SynthConfig;
use crate::triplet::{FinetuneConfig, MiningConfig, MiningMode, ReplacementStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub select_domains: bool,
    pub word_count_threshold: usize,
    /// Read the per-domain total as `n0 + n0`.
    pub literal_total: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            select_domains: false,
            word_count_threshold: DEFAULT_WORD_COUNT_THRESHOLD,
            literal_total: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub balance: bool,
    pub aggressive_threshold: usize,
    pub folds: usize,
    pub test_fraction: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            balance: true,
            aggressive_threshold: 5000,
            folds: 10,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub centroids: CentroidMode,
    pub provider: ProviderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IfcsConfig {
    pub metric: Metric,
    pub selection: SelectionRule,
}

impl Default for IfcsConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Kl,
            selection: SelectionRule::TopK { k: 5 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplacementConfig {
    pub strategy: ReplacementStrategy,
}

impl Default for ReplacementConfig {
    fn default() -> Self {
        Self {
            strategy: ReplacementStrategy::AllFeatures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReduceConfig {
    pub pca: bool,
    /// Fixed component count instead of the kneedle choice.
    pub n_components: Option<usize>,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            pca: true,
            n_components: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub mode: EvalMode,
    pub mlp: MlpConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Binary,
            mlp: MlpConfig::default(),
        }
    }
}

/// Axes of the ablation grid; every combination is run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub metrics: Vec<Metric>,
    pub mining: Vec<MiningMode>,
    pub strategies: Vec<ReplacementStrategy>,
    pub pca: Vec<bool>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Wd, Metric::Kl],
            mining: vec![MiningMode::Hard, MiningMode::Soft],
            strategies: vec![
                ReplacementStrategy::SelectedOnly,
                ReplacementStrategy::AllFeatures,
            ],
            pca: vec![true, false],
        }
    }
}

/// Every stage parameter in one file. The top-level `seed` is copied into
/// each section by [`PipelineConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    /// Flow records to ingest; the synthetic corpus is generated when unset.
    pub corpus: Option<PathBuf>,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub prep: PrepConfig,
    pub embed: EmbedConfig,
    pub autoencoder: AeConfig,
    pub ifcs: IfcsConfig,
    pub mining: MiningConfig,
    pub finetune: FinetuneConfig,
    pub replacement: ReplacementConfig,
    pub reduce: ReduceConfig,
    pub classifier: ClassifierConfig,
    pub ft: FtConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            work_dir: PathBuf::from("run"),
            corpus: None,
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            prep: PrepConfig::default(),
            embed: EmbedConfig::default(),
            autoencoder: AeConfig::default(),
            ifcs: IfcsConfig::default(),
            mining: MiningConfig::default(),
            finetune: FinetuneConfig::default(),
            replacement: ReplacementConfig::default(),
            reduce: ReduceConfig::default(),
            classifier: ClassifierConfig::default(),
            ft: FtConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput {
                    what: "config file".into(),
                    path: path.to_path_buf(),
                }
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Copy of the config with the master seed pushed into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = c.seed;
        c.synth.seed = s;
        c.embed.provider.seed = s;
        c.autoencoder.seed = s;
        c.mining.seed = s;
        c.finetune.seed = s;
        c.classifier.mlp.seed = s;
        c.ft.seed = s;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.embed.provider.validate()?;
        self.autoencoder.validate()?;
        self.mining.validate()?;
        self.classifier.mlp.validate()?;
        self.ft.validate()?;
        if self.prep.folds < 2 {
            return Err(Error::Config(format!("prep.folds {} < 2", self.prep.folds)));
        }
        if !(self.prep.test_fraction > 0.0 && self.prep.test_fraction < 0.5) {
            return Err(Error::Config(
                "prep.test_fraction must lie in (0, 0.5)".into(),
            ));
        }
        if self.prep.aggressive_threshold == 0 {
            return Err(Error::Config(
                "prep.aggressive_threshold must be positive".into(),
            ));
        }
        if !(self.finetune.margin >= 0.0)
            || self.finetune.hidden == 0
            || !(self.finetune.learning_rate > 0.0)
        {
            return Err(Error::Config(
                "finetune margin, hidden width and learning rate must be positive".into(),
            ));
        }
        match self.ifcs.selection {
            SelectionRule::TopK { k } if k == 0 => {
                return Err(Error::Config("ifcs.selection.k must be positive".into()))
            }
            SelectionRule::Threshold { tau } if !tau.is_finite() => {
                return Err(Error::Config("ifcs.selection.tau must be finite".into()))
            }
            _ => {}
        }
        if self.reduce.n_components == Some(0) {
            return Err(Error::Config("reduce.n_components must be positive".into()));
        }
        let s = &self.sweep;
        if s.metrics.is_empty()
            || s.mining.is_empty()
            || s.strategies.is_empty()
            || s.pca.is_empty()
        {
            return Err(Error::Config(
                "every sweep axis needs at least one value".into(),
            ));
        }
        Ok(())
    }
}

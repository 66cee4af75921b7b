//! 384-dimensional text embeddings and the per-sample, per-feature store.

pub mod cache;
pub mod hash;
pub mod remote;
pub mod store;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::EmbeddingCache;
pub use hash::HashEmbedder;
pub use remote::RemoteEmbedder;
pub use store::{build_store, CentroidMode, EmbeddingStore};

pub const EMBED_DIM: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub ngram_sizes: Vec<usize>,
    pub seed: u64,
    pub endpoint: Option<String>,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Hash,
            ngram_sizes: vec![3, 4],
            seed: 0,
            endpoint: None,
            batch_size: 64,
            timeout_ms: 30_000,
            cache_dir: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ngram_sizes.is_empty() || self.ngram_sizes.contains(&0) {
            return Err(Error::Config(
                "n-gram sizes must be positive and non-empty".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("provider batch size must be positive".into()));
        }
        if self.kind == ProviderKind::Remote && self.endpoint.is_none() {
            return Err(Error::Config("remote provider needs an endpoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Provider {
    Hash(HashEmbedder),
    Remote(RemoteEmbedder),
}

impl Provider {
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            ProviderKind::Hash => Provider::Hash(HashEmbedder::new(&cfg.ngram_sizes, cfg.seed)),
            ProviderKind::Remote => {
                let endpoint = cfg.endpoint.clone().unwrap_or_default();
                let mut r = RemoteEmbedder::new(
                    endpoint.clone(),
                    cfg.batch_size,
                    Duration::from_millis(cfg.timeout_ms),
                );
                if let Some(dir) = &cfg.cache_dir {
                    r = r.with_cache(EmbeddingCache::new(dir, endpoint)?);
                }
                Provider::Remote(r)
            }
        })
    }

    /// Order-preserving embeddings of `texts`.
    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        match self {
            Provider::Hash(h) => Ok(texts.iter().map(|t| h.embed(t)).collect()),
            Provider::Remote(r) => r.embed_batch(texts),
        }
    }
}

//! On-disk embedding cache: one little-endian f64 file per content hash.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::EMBED_DIM;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
    namespace: String,
}

impl EmbeddingCache {
    /// `namespace` separates vectors from different providers.
    pub fn new(dir: impl Into<PathBuf>, namespace: impl Into<String>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            namespace: namespace.into(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.namespace.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, text: &str) -> PathBuf {
        self.dir.join(format!("{}.f64", self.key(text)))
    }

    /// Cached vector, or `None` when absent or of the wrong size.
    pub fn get(&self, text: &str) -> Option<Vec<f64>> {
        let bytes = fs::read(self.path(text)).ok()?;
        if bytes.len() != EMBED_DIM * 8 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    pub fn put(&self, text: &str, v: &[f64]) -> Result<()> {
        let path = self.path(text);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&tmp, bytes)?;
        // rename is atomic, so readers never see a partial file
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = EmbeddingCache::new(dir.path(), "t").unwrap();
        let v: Vec<f64> = (0..EMBED_DIM).map(|i| (i as f64).sin() / 7.0).collect();
        assert!(c.get("x").is_none());
        c.put("x", &v).unwrap();
        assert_eq!(c.get("x").unwrap(), v);
        let other = EmbeddingCache::new(dir.path(), "u").unwrap();
        assert!(other.get("x").is_none());
    }
}

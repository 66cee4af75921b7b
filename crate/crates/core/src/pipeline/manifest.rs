use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Provenance record written next to a stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub elapsed_ms: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn path_for(dir: &Path, stage: &str) -> PathBuf {
        dir.join(format!("{stage}{MANIFEST_SUFFIX}"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Every manifest in `dir`, sorted by stage name.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.to_string_lossy().ends_with(MANIFEST_SUFFIX) {
                out.push(Self::load(&p)?);
            }
        }
        out.sort_by(|a, b| a.stage.cmp(&b.stage));
        Ok(out)
    }
}

/// Walks the hash graph backwards from `root`: an input is explained by the
/// manifest that lists the same path and hash among its outputs. Fails when
/// a recorded file no longer matches its hash, or when some manifest's
/// output is not reachable from `root`. Returns the reachable stages.
pub fn audit(manifests: &[Manifest], root: &str) -> Result<Vec<String>> {
    let find = |stage: &str| manifests.iter().find(|m| m.stage == stage);
    let start =
        find(root).ok_or_else(|| Error::Dataset(format!("no manifest for stage {root}")))?;
    for m in manifests {
        for f in &m.outputs {
            if !f.path.exists() || sha256_file(&f.path)? != f.sha256 {
                return Err(Error::Dataset(format!(
                    "{} changed since stage {} wrote it",
                    f.path.display(),
                    m.stage
                )));
            }
        }
    }
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut stack = vec![start];
    while let Some(m) = stack.pop() {
        if !seen.insert(m.stage.clone()) {
            continue;
        }
        for input in &m.inputs {
            if let Some(producer) = manifests.iter().find(|p| p.outputs.contains(input)) {
                stack.push(producer);
            }
        }
    }
    for m in manifests {
        if !seen.contains(&m.stage) {
            return Err(Error::Dataset(format!(
                "outputs of stage {} are not reachable from {root}",
                m.stage
            )));
        }
    }
    Ok(seen.into_iter().collect())
}

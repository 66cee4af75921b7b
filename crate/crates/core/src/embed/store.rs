//! Per-sample, per-feature embedding store with per-feature centroids.
//!
//! Vectors are pooled: each distinct (feature, cell text) pair is stored
//! once and samples refer to pool rows by index.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Provider;
use crate::error::{Error, Result};
use crate::table::TabularDataset;

const MAGIC: &[u8; 4] = b"PSES";
const VERSION: u32 = 1;
const EMBED_CHUNK: usize = 256;

/// What a feature's centroid is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    /// Mean of the feature's per-sample value embeddings.
    #[default]
    Values,
    /// Embedding of the feature name itself.
    Names,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    feature_names: Vec<String>,
    n_samples: usize,
    dim: usize,
    mode: CentroidMode,
    pool: Vec<f64>,
    pool_feature: Vec<u32>,
    index: Vec<u32>,
    /// Pool rows holding feature-name vectors, in `Names` mode.
    name_rows: Vec<u32>,
    centroids: Vec<f64>,
}

impl EmbeddingStore {
    pub fn from_parts(
        feature_names: Vec<String>,
        n_samples: usize,
        dim: usize,
        mode: CentroidMode,
        pool: Vec<f64>,
        pool_feature: Vec<u32>,
        index: Vec<u32>,
        name_rows: Vec<u32>,
    ) -> Result<Self> {
        let d = feature_names.len();
        let p = pool_feature.len();
        let bad = |m: String| Err(Error::Dataset(m));
        if dim == 0 || pool.len() != p * dim {
            return bad(format!(
                "pool has {} values for {p} rows of width {dim}",
                pool.len()
            ));
        }
        if index.len() != n_samples * d {
            return bad(format!(
                "index has {} entries, expected {}",
                index.len(),
                n_samples * d
            ));
        }
        if index.iter().chain(&name_rows).any(|&r| r as usize >= p) {
            return bad("pool reference out of range".into());
        }
        if pool_feature.iter().any(|&f| f as usize >= d) {
            return bad("pool row tagged with unknown feature".into());
        }
        for i in 0..n_samples {
            for j in 0..d {
                if pool_feature[index[i * d + j] as usize] as usize != j {
                    return bad(format!(
                        "sample {i} feature {j} points at another feature's row"
                    ));
                }
            }
        }
        if mode == CentroidMode::Names && name_rows.len() != d {
            return bad("name centroids need one pool row per feature".into());
        }
        if !pool.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding in store".into()));
        }
        let mut store = Self {
            feature_names,
            n_samples,
            dim,
            mode,
            pool,
            pool_feature,
            index,
            name_rows,
            centroids: Vec::new(),
        };
        store.recompute_centroids();
        Ok(store)
    }

    fn recompute_centroids(&mut self) {
        let (d, dim) = (self.n_features(), self.dim);
        let mut c = vec![0.0; d * dim];
        match self.mode {
            CentroidMode::Values => {
                let mut counts = vec![0usize; self.pool_len()];
                for &r in &self.index {
                    counts[r as usize] += 1;
                }
                for (r, &count) in counts.iter().enumerate() {
                    if count == 0 {
                        continue;
                    }
                    let j = self.pool_feature[r] as usize;
                    let v = self.pool_row(r);
                    for (acc, x) in c[j * dim..(j + 1) * dim].iter_mut().zip(v) {
                        *acc += count as f64 * x;
                    }
                }
                if self.n_samples > 0 {
                    let n = self.n_samples as f64;
                    c.iter_mut().for_each(|x| *x /= n);
                }
            }
            CentroidMode::Names => {
                for (j, &r) in self.name_rows.iter().enumerate() {
                    c[j * dim..(j + 1) * dim].copy_from_slice(self.pool_row(r as usize));
                }
            }
        }
        self.centroids = c;
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CentroidMode {
        self.mode
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn pool_len(&self) -> usize {
        self.pool_feature.len()
    }

    pub fn pool(&self) -> &[f64] {
        &self.pool
    }

    pub fn pool_row(&self, r: usize) -> &[f64] {
        &self.pool[r * self.dim..(r + 1) * self.dim]
    }

    pub fn pool_features(&self) -> &[u32] {
        &self.pool_feature
    }

    /// Vector of sample `i`, feature `j`.
    pub fn vector(&self, i: usize, j: usize) -> &[f64] {
        self.pool_row(self.index[i * self.n_features() + j] as usize)
    }

    pub fn pool_index(&self, i: usize, j: usize) -> usize {
        self.index[i * self.n_features() + j] as usize
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> Vec<Vec<f64>> {
        (0..self.n_features())
            .map(|j| self.centroid(j).to_vec())
            .collect()
    }

    /// Row `i` as the concatenation of its feature vectors.
    pub fn flat_row(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_features() * self.dim);
        for j in 0..self.n_features() {
            out.extend_from_slice(self.vector(i, j));
        }
        out
    }

    /// Store restricted to the given samples, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingStore {
        let d = self.n_features();
        let mut index = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            index.extend_from_slice(&self.index[i * d..(i + 1) * d]);
        }
        let mut s = Self {
            index,
            n_samples: rows.len(),
            centroids: Vec::new(),
            ..self.clone()
        };
        s.recompute_centroids();
        s
    }

    /// Rewrites every pool row whose feature is flagged in `mask` through
    /// `f`, which maps a row-major `m × dim` block to `m × out_dim`.
    /// Changing the width requires every feature to be flagged.
    pub fn transform<F>(&self, mask: &[bool], out_dim: usize, f: F) -> Result<EmbeddingStore>
    where
        F: FnOnce(&[f64], usize) -> Result<Vec<f64>>,
    {
        if mask.len() != self.n_features() {
            return Err(Error::Dimension {
                expected: self.n_features(),
                got: mask.len(),
            });
        }
        if out_dim != self.dim && !mask.iter().all(|&m| m) {
            return Err(Error::Dataset(
                "width change must cover every feature".into(),
            ));
        }
        let rows: Vec<usize> = (0..self.pool_len())
            .filter(|&r| mask[self.pool_feature[r] as usize])
            .collect();
        let mut block = Vec::with_capacity(rows.len() * self.dim);
        for &r in &rows {
            block.extend_from_slice(self.pool_row(r));
        }
        let mapped = f(&block, rows.len())?;
        if mapped.len() != rows.len() * out_dim {
            return Err(Error::Dimension {
                expected: rows.len() * out_dim,
                got: mapped.len(),
            });
        }
        let pool = if out_dim == self.dim {
            let mut pool = self.pool.clone();
            for (k, &r) in rows.iter().enumerate() {
                pool[r * out_dim..(r + 1) * out_dim]
                    .copy_from_slice(&mapped[k * out_dim..(k + 1) * out_dim]);
            }
            pool
        } else {
            mapped
        };
        Self::from_parts(
            self.feature_names.clone(),
            self.n_samples,
            out_dim,
            self.mode,
            pool,
            self.pool_feature.clone(),
            self.index.clone(),
            self.name_rows.clone(),
        )
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        w.write_all(MAGIC)?;
        let u32s = [
            VERSION,
            self.n_features() as u32,
            self.n_samples as u32,
            self.dim as u32,
            self.pool_len() as u32,
            (self.mode == CentroidMode::Names) as u32,
        ];
        for v in u32s {
            w.write_all(&v.to_le_bytes())?;
        }
        for name in &self.feature_names {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        for v in &self.pool {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.pool_feature.iter().chain(&self.index) {
            w.write_all(&v.to_le_bytes())?;
        }
        if self.mode == CentroidMode::Names {
            for v in &self.name_rows {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Dataset("not an embedding store".into()));
        }
        let mut u32s = [0u32; 6];
        for v in &mut u32s {
            *v = read_u32(&mut r)?;
        }
        let [version, d, n, dim, p, names] = u32s;
        if version != VERSION {
            return Err(Error::Dataset(format!(
                "unsupported store version {version}"
            )));
        }
        let mut feature_names = Vec::with_capacity(d as usize);
        for _ in 0..d {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            feature_names.push(
                String::from_utf8(buf)
                    .map_err(|_| Error::Dataset("feature name not UTF-8".into()))?,
            );
        }
        let mut pool = vec![0.0; p as usize * dim as usize];
        let mut b8 = [0u8; 8];
        for v in &mut pool {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        let read_vec = |r: &mut BufReader<R>, len: usize| -> Result<Vec<u32>> {
            (0..len).map(|_| read_u32(r)).collect()
        };
        let pool_feature = read_vec(&mut r, p as usize)?;
        let index = read_vec(&mut r, n as usize * d as usize)?;
        let (mode, name_rows) = if names == 1 {
            (CentroidMode::Names, read_vec(&mut r, d as usize)?)
        } else {
            (CentroidMode::Values, Vec::new())
        };
        Self::from_parts(
            feature_names,
            n as usize,
            dim as usize,
            mode,
            pool,
            pool_feature,
            index,
            name_rows,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Embeds every cell of `ds` through `provider`.
pub fn build_store(
    ds: &TabularDataset,
    provider: &Provider,
    mode: CentroidMode,
) -> Result<EmbeddingStore> {
    let (n, d) = (ds.n_samples(), ds.n_features());
    if n == 0 {
        return Err(Error::EmptyInput("dataset has no samples"));
    }
    let mut texts: Vec<String> = Vec::new();
    let mut text_id: HashMap<String, usize> = HashMap::new();
    let mut intern = |t: String, texts: &mut Vec<String>| -> usize {
        *text_id.entry(t.clone()).or_insert_with(|| {
            texts.push(t);
            texts.len() - 1
        })
    };
    // pool rows as (feature, text id)
    let mut pool_keys: Vec<(u32, usize)> = Vec::new();
    let mut pool_id: HashMap<(u32, usize), u32> = HashMap::new();
    // first cell using each text, for error reporting
    let mut first_use: Vec<(usize, usize)> = Vec::new();
    let mut index = vec![0u32; n * d];
    for j in 0..d {
        for i in 0..n {
            let t = intern(ds.cell_text(i, j).into_owned(), &mut texts);
            if t == first_use.len() {
                first_use.push((i, j));
            }
            let key = (j as u32, t);
            let r = *pool_id.entry(key).or_insert_with(|| {
                pool_keys.push(key);
                (pool_keys.len() - 1) as u32
            });
            index[i * d + j] = r;
        }
    }
    let mut name_rows = Vec::new();
    if mode == CentroidMode::Names {
        for (j, name) in ds.feature_names().iter().enumerate() {
            let t = intern(name.clone(), &mut texts);
            if t == first_use.len() {
                first_use.push((0, j));
            }
            let key = (j as u32, t);
            let r = *pool_id.entry(key).or_insert_with(|| {
                pool_keys.push(key);
                (pool_keys.len() - 1) as u32
            });
            name_rows.push(r);
        }
    }

    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
    for (c, chunk) in texts.chunks(EMBED_CHUNK).enumerate() {
        let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
        let out = provider.embed_batch(&refs).map_err(|e| {
            let (sample, feature) = first_use[c * EMBED_CHUNK];
            Error::Provider {
                sample,
                feature: ds.feature_names()[feature].clone(),
                message: e.to_string(),
            }
        })?;
        vectors.extend(out);
    }
    let dim = vectors.first().map_or(super::EMBED_DIM, Vec::len);
    let mut pool = Vec::with_capacity(pool_keys.len() * dim);
    let mut pool_feature = Vec::with_capacity(pool_keys.len());
    for &(j, t) in &pool_keys {
        pool.extend_from_slice(&vectors[t]);
        pool_feature.push(j);
    }
    EmbeddingStore::from_parts(
        ds.feature_names().to_vec(),
        n,
        dim,
        mode,
        pool,
        pool_feature,
        index,
        name_rows,
    )
}

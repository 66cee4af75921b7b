//! Stratified k-fold split with a held-out test set.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_indices: Vec<Vec<usize>>,
    pub test_indices: Vec<usize>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.fold_indices.len()
    }

    /// Every non-test index, sorted.
    pub fn pool(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.fold_indices.iter().flatten().copied().collect();
        p.sort_unstable();
        p
    }

    /// Pool indices outside fold `f`, sorted.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        let mut p: Vec<usize> = self
            .fold_indices
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        p.sort_unstable();
        p
    }

    /// Two-column CSV: sample index and its fold number or `test`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.fold_indices.iter().map(Vec::len).sum::<usize>() + self.test_indices.len();
        let mut assign = vec![String::new(); n];
        for (f, fold) in self.fold_indices.iter().enumerate() {
            for &i in fold {
                assign[i] = f.to_string();
            }
        }
        for &i in &self.test_indices {
            assign[i] = "test".into();
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "fold"])?;
        for (i, a) in assign.iter().enumerate() {
            w.write_record([i.to_string().as_str(), a.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`FoldSplit::write_csv`]. `k` is one more than the
    /// largest fold number seen.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut folds: Vec<Vec<usize>> = Vec::new();
        let mut test = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = || Error::Dataset(format!("fold file row {}: malformed", line + 2));
            let idx: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if idx != line {
                return Err(bad());
            }
            match rec.get(1).ok_or_else(bad)? {
                "test" => test.push(idx),
                f => {
                    let f: usize = f.parse().map_err(|_| bad())?;
                    if folds.len() <= f {
                        folds.resize(f + 1, Vec::new());
                    }
                    folds[f].push(idx);
                }
            }
        }
        Ok(Self {
            fold_indices: folds,
            test_indices: test,
        })
    }

    /// The split seen through a subset of samples: indices are renumbered to
    /// positions in `rows` and samples outside it are dropped.
    pub fn restrict(&self, rows: &[usize]) -> Self {
        let mut pos = std::collections::HashMap::new();
        for (p, &i) in rows.iter().enumerate() {
            pos.insert(i, p);
        }
        let map = |v: &Vec<usize>| -> Vec<usize> {
            v.iter().filter_map(|i| pos.get(i).copied()).collect()
        };
        Self {
            fold_indices: self.fold_indices.iter().map(map).collect(),
            test_indices: map(&self.test_indices),
        }
    }
}

/// Splits `labels.len()` samples into a stratified test set of
/// `round(n * test_fraction)` and `k` stratified folds over the rest.
pub fn kfold_split(labels: &[bool], k: usize, test_fraction: f64, seed: u64) -> Result<FoldSplit> {
    let n = labels.len();
    if k < 2 {
        return Err(Error::Config(format!("k = {k} must be at least 2")));
    }
    if !(test_fraction > 0.0 && test_fraction < 0.5) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside (0, 0.5)"
        )));
    }
    if n < k + 1 {
        return Err(Error::TooFewSamples(format!(
            "{n} samples for {k} folds plus a test set"
        )));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - k);

    let mut rng = seeded(seed, 0x0F01);
    let mut classes: [Vec<usize>; 2] = [
        (0..n).filter(|&i| !labels[i]).collect(),
        (0..n).filter(|&i| labels[i]).collect(),
    ];
    for c in &mut classes {
        c.shuffle(&mut rng);
    }

    // largest-remainder allocation of test slots to classes
    let exact1 = n_test as f64 * classes[1].len() as f64 / n as f64;
    let t1 = (exact1.round() as usize).min(classes[1].len());
    let t0 = (n_test - t1).min(classes[0].len());
    let t1 = n_test - t0;

    let mut test = Vec::with_capacity(n_test);
    test.extend_from_slice(&classes[0][..t0]);
    test.extend_from_slice(&classes[1][..t1]);
    test.sort_unstable();

    let mut folds = vec![Vec::new(); k];
    let pool = classes[0][t0..].iter().chain(&classes[1][t1..]);
    for (j, &i) in pool.enumerate() {
        folds[j % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit {
        fold_indices: folds,
        test_indices: test,
    })
}

//! Class-imbalance balancing by seeded over- and undersampling.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::table::TabularDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    /// Minimum per-class size when both classes are tiny.
    pub folds: usize,
    /// Majority size above which class 0 is cut back hard.
    pub aggressive_threshold: usize,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            aggressive_threshold: 5000,
            seed: 0,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("balance folds {} < 2", self.folds)));
        }
        if self.aggressive_threshold == 0 {
            return Err(Error::Config(
                "aggressive threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Signed size changes for class 0 and class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalancePlan {
    pub delta0: i64,
    pub delta1: i64,
}

pub fn plan(n0: usize, n1: usize, folds: usize, threshold: usize) -> BalancePlan {
    let (n0, n1, f, m) = (n0 as i64, n1 as i64, folds as i64, threshold as i64);
    let (mut d0, mut d1) = (0, 0);
    if n0 < f && n1 < f {
        d0 = f - n0;
        d1 = f - n1;
    } else if n1 > n0 {
        d0 = n1 - n0;
    } else if n0 > m {
        d0 = m - n0;
    } else if n0 > 100 {
        if n1 > 100 {
            d0 = 100 - n0;
        } else {
            d1 = 100 - n1;
            d0 = 100 - n0;
        }
    } else {
        d1 = n0 - n1;
    }
    BalancePlan {
        delta0: d0,
        delta1: d1,
    }
}

/// `rows` followed by `k` rows drawn uniformly with replacement.
pub fn oversample<T: Clone>(rows: &[T], k: usize, seed: u64) -> Result<Vec<T>> {
    if rows.is_empty() && k > 0 {
        return Err(Error::EmptyInput("oversample needs at least one row"));
    }
    let mut rng = seeded(seed, 0x0701);
    let mut out = rows.to_vec();
    out.extend((0..k).map(|_| rows[rng.gen_range(0..rows.len())].clone()));
    Ok(out)
}

/// Uniform subset of `min(target, rows.len())` rows, in original order.
pub fn undersample<T: Clone>(rows: &[T], target: i64, seed: u64) -> Result<Vec<T>> {
    if target <= 0 {
        return Err(Error::Dataset(format!(
            "undersample target {target} must be positive"
        )));
    }
    let target = (target as usize).min(rows.len());
    let mut rng = seeded(seed, 0x0702);
    let mut picked = index::sample(&mut rng, rows.len(), target).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| rows[i].clone()).collect())
}

/// Row indices of the balanced dataset (class 1 first, then class 0).
///
/// A class with no rows cannot be oversampled and stays empty.
pub fn balance_indices(labels: &[bool], cfg: &BalanceConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let class1: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let class0: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let (n0, n1) = (class0.len(), class1.len());
    if n0 == 0 && n1 == 0 {
        return Err(Error::EmptyInput("both classes are empty"));
    }
    let p = plan(n0, n1, cfg.folds, cfg.aggressive_threshold);
    let mut parts = [class0, class1];
    for (i, delta) in [p.delta0, p.delta1].into_iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        if delta > 0 && !parts[i].is_empty() {
            parts[i] = oversample(&parts[i], delta as usize, seed)?;
        } else if delta < 0 {
            let target = (n0 + n1) as i64 + delta;
            parts[i] = undersample(&parts[i], target, seed)?;
        }
    }
    let [class0, class1] = parts;
    Ok(class1.into_iter().chain(class0).collect())
}

pub fn balance_classes(ds: &TabularDataset, cfg: &BalanceConfig) -> Result<TabularDataset> {
    let rows = balance_indices(ds.labels(), cfg)?;
    Ok(ds.select_rows(&rows))
}

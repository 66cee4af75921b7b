//! Multi-label target matrices.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NO_PII_COLUMN: &str = "no_pii";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Only rows with at least one type.
    LeakOnly,
    /// All rows, plus a `no_pii` column.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub type_names: Vec<String>,
    /// Source sample index of each kept row.
    pub rows: Vec<usize>,
    /// Row-major `rows.len() × type_names.len()` of 0/1.
    pub matrix: Vec<u8>,
}

impl LabelMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        let t = self.n_types();
        &self.matrix[i * t..(i + 1) * t]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.matrix.iter().map(|&v| v as f64).collect()
    }
}

pub fn binarize_labels(
    sets: &[BTreeSet<String>],
    universe: &[String],
    mode: LabelMode,
) -> Result<LabelMatrix> {
    let mut type_names = universe.to_vec();
    if mode == LabelMode::Combined {
        type_names.push(NO_PII_COLUMN.to_string());
    }
    let width = type_names.len();
    let mut rows = Vec::new();
    let mut matrix = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        if let Some(bad) = set.iter().find(|t| !universe.contains(t)) {
            return Err(Error::UnknownType(bad.clone()));
        }
        if set.is_empty() && mode == LabelMode::LeakOnly {
            continue;
        }
        let start = matrix.len();
        matrix.extend(universe.iter().map(|t| set.contains(t) as u8));
        if mode == LabelMode::Combined {
            matrix.push(set.is_empty() as u8);
        }
        debug_assert_eq!(matrix.len() - start, width);
        rows.push(i);
    }
    Ok(LabelMatrix {
        type_names,
        rows,
        matrix,
    })
}

/// Sorted union of every type name that occurs.
pub fn observed_types(sets: &[BTreeSet<String>]) -> Vec<String> {
    let all: BTreeSet<&String> = sets.iter().flatten().collect();
    all.into_iter().cloned().collect()
}

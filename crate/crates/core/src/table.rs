//! Typed tabular view of a flow corpus and its CSV + JSON sidecar format.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{extract_key_values, FlowRecord};

pub const LABEL_COLUMN: &str = "__label__";
pub const PII_TYPES_COLUMN: &str = "__pii_types__";
pub const MISSING_CATEGORY: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Numerical,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Categorical(Vec<String>),
    Numerical(Vec<f64>),
}

impl Column {
    pub fn kind(&self) -> FeatureKind {
        match self {
            Column::Categorical(_) => FeatureKind::Categorical,
            Column::Numerical(_) => FeatureKind::Numerical,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Column::Categorical(v) => v.len(),
            Column::Numerical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Categorical(v) => {
                Column::Categorical(rows.iter().map(|&i| v[i].clone()).collect())
            }
            Column::Numerical(v) => Column::Numerical(rows.iter().map(|&i| v[i]).collect()),
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Column::Categorical(v) => v.windows(2).all(|w| w[0] == w[1]),
            Column::Numerical(v) => v.windows(2).all(|w| w[0] == w[1]),
        }
    }

    pub fn text(&self, row: usize) -> Cow<'_, str> {
        match self {
            Column::Categorical(v) => Cow::Borrowed(v[row].as_str()),
            Column::Numerical(v) => Cow::Owned(format_number(v[row])),
        }
    }
}

/// Shortest decimal text that parses back to the same value; no exponent,
/// no trailing zeros, `-0` folded to `0`.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        v.to_string()
    }
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// N×d table of categorical and numerical features with binary labels and
/// PII-type sets. Stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    names: Vec<String>,
    columns: Vec<Column>,
    labels: Vec<bool>,
    pii_types: Vec<BTreeSet<String>>,
}

impl TabularDataset {
    pub fn new(
        names: Vec<String>,
        columns: Vec<Column>,
        labels: Vec<bool>,
        pii_types: Vec<BTreeSet<String>>,
    ) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Dataset(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Dataset("duplicate feature names".into()));
        }
        let n = labels.len();
        if pii_types.len() != n || columns.iter().any(|c| c.len() != n) {
            return Err(Error::Dataset("ragged rows".into()));
        }
        for c in &columns {
            if let Column::Numerical(v) = c {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Dataset("non-finite numerical cell".into()));
                }
            }
        }
        Ok(Self {
            names,
            columns,
            labels,
            pii_types,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.names
    }

    pub fn feature_kinds(&self) -> Vec<FeatureKind> {
        self.columns.iter().map(Column::kind).collect()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn pii_types(&self) -> &[BTreeSet<String>] {
        &self.pii_types
    }

    pub fn cell_text(&self, row: usize, col: usize) -> Cow<'_, str> {
        self.columns[col].text(row)
    }

    pub fn class_count(&self, positive: bool) -> usize {
        self.labels.iter().filter(|&&l| l == positive).count()
    }

    /// Rows in the given order; indices may repeat.
    pub fn select_rows(&self, rows: &[usize]) -> TabularDataset {
        TabularDataset {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            pii_types: rows.iter().map(|&i| self.pii_types[i].clone()).collect(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> TabularDataset {
        TabularDataset {
            names: cols.iter().map(|&j| self.names[j].clone()).collect(),
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
            labels: self.labels.clone(),
            pii_types: self.pii_types.clone(),
        }
    }

    /// Canonical text of every cell of one row, in column order.
    pub fn row_texts(&self, row: usize) -> Vec<String> {
        self.columns
            .iter()
            .map(|c| c.text(row).into_owned())
            .collect()
    }
}

/// Builds the table from records: one column per key in order of first
/// appearance; a column is numerical iff every present value is a finite
/// real. Absent cells become `-` (categorical) or `0` (numerical).
pub fn tabularize(records: &[FlowRecord]) -> Result<TabularDataset> {
    if records.is_empty() {
        return Err(Error::EmptyInput("tabularize needs at least one record"));
    }
    let rows: Vec<IndexMap<String, String>> = records.iter().map(extract_key_values).collect();
    let mut names: IndexMap<String, ()> = IndexMap::new();
    for kv in &rows {
        for k in kv.keys() {
            names.entry(k.clone()).or_insert(());
        }
    }
    let mut columns = Vec::with_capacity(names.len());
    for name in names.keys() {
        let numeric = rows
            .iter()
            .filter_map(|kv| kv.get(name))
            .all(|v| parse_finite(v).is_some());
        let col = if numeric {
            Column::Numerical(
                rows.iter()
                    .map(|kv| kv.get(name).and_then(|v| parse_finite(v)).unwrap_or(0.0))
                    .collect(),
            )
        } else {
            Column::Categorical(
                rows.iter()
                    .map(|kv| {
                        kv.get(name)
                            .cloned()
                            .unwrap_or_else(|| MISSING_CATEGORY.to_string())
                    })
                    .collect(),
            )
        };
        columns.push(col);
    }
    TabularDataset::new(
        names.into_keys().collect(),
        columns,
        records.iter().map(FlowRecord::is_leak).collect(),
        records.iter().map(FlowRecord::type_set).collect(),
    )
}

/// Removes every column holding a single value across all rows.
pub fn drop_constant_features(ds: &TabularDataset) -> Result<TabularDataset> {
    let keep: Vec<usize> = (0..ds.n_features())
        .filter(|&j| !ds.columns[j].is_constant())
        .collect();
    if keep.is_empty() {
        return Err(Error::NoInformativeFeatures);
    }
    Ok(ds.select_columns(&keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    pub kind: FeatureKind,
}

/// Sidecar describing a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub features: Vec<FeatureMeta>,
    pub label_column: String,
    pub pii_types_column: String,
    pub pii_types_separator: String,
    pub rows: usize,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

pub fn write_dataset(ds: &TabularDataset, csv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
    let mut header: Vec<&str> = ds.names.iter().map(String::as_str).collect();
    header.push(LABEL_COLUMN);
    header.push(PII_TYPES_COLUMN);
    w.write_record(&header)?;
    for i in 0..ds.n_samples() {
        let mut row = ds.row_texts(i);
        row.push(if ds.labels[i] { "1" } else { "0" }.to_string());
        row.push(
            ds.pii_types[i]
                .iter()
                .cloned()
                .collect::<Vec<_>>()
                .join(";"),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    let meta = DatasetMeta {
        features: ds
            .names
            .iter()
            .zip(&ds.columns)
            .map(|(n, c)| FeatureMeta {
                name: n.clone(),
                kind: c.kind(),
            })
            .collect(),
        label_column: LABEL_COLUMN.into(),
        pii_types_column: PII_TYPES_COLUMN.into(),
        pii_types_separator: ";".into(),
        rows: ds.n_samples(),
    };
    let f = BufWriter::new(File::create(sidecar_path(csv_path))?);
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

pub fn read_dataset(csv_path: &Path) -> Result<TabularDataset> {
    let meta: DatasetMeta =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path(csv_path))?))?;
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(csv_path)?));
    let d = meta.features.len();
    let header = r.headers()?.clone();
    if header.len() != d + 2 {
        return Err(Error::Dataset(format!(
            "CSV has {} columns, sidecar describes {}",
            header.len(),
            d + 2
        )));
    }
    let mut cat: Vec<Vec<String>> = vec![Vec::new(); d];
    let mut num: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut labels = Vec::new();
    let mut types = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for (j, f) in meta.features.iter().enumerate() {
            let cell = &rec[j];
            match f.kind {
                FeatureKind::Categorical => cat[j].push(cell.to_string()),
                FeatureKind::Numerical => num[j].push(parse_finite(cell).ok_or_else(|| {
                    Error::Dataset(format!("non-numeric cell {cell:?} in {}", f.name))
                })?),
            }
        }
        labels.push(&rec[d] == "1");
        let t = &rec[d + 1];
        types.push(if t.is_empty() {
            BTreeSet::new()
        } else {
            t.split(meta.pii_types_separator.as_str())
                .map(str::to_string)
                .collect()
        });
    }
    let columns = meta
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| match f.kind {
            FeatureKind::Categorical => Column::Categorical(std::mem::take(&mut cat[j])),
            FeatureKind::Numerical => Column::Numerical(std::mem::take(&mut num[j])),
        })
        .collect();
    TabularDataset::new(
        meta.features.into_iter().map(|f| f.name).collect(),
        columns,
        labels,
        types,
    )
}

//! Standardisation, principal component analysis and elbow selection over
//! flattened per-sample embeddings.

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};

pub const STD_GUARD: f64 = 1e-12;
/// Knee distance below which the elbow is reported as weak.
pub const LOW_CONFIDENCE: f64 = 0.05;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Header `c0..c{cols-1}`, one row per sample, shortest round-trip
    /// decimal text.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record((0..self.cols).map(|c| format!("c{c}")))?;
        for i in 0..self.rows {
            w.write_record(self.row(i).iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let cols = r.headers()?.len();
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec?;
            for v in rec.iter() {
                data.push(
                    v.parse::<f64>().map_err(|_| {
                        Error::Dataset(format!("matrix cell {v:?} is not a number"))
                    })?,
                );
            }
            rows += 1;
        }
        Matrix::new(rows, cols, data)
    }

    fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Row `i` is sample `i`'s feature vectors concatenated in feature order.
pub fn flatten(store: &EmbeddingStore) -> Matrix {
    let (n, w) = (store.n_samples(), store.n_features() * store.dim());
    let mut data = Vec::with_capacity(n * w);
    for i in 0..n {
        data.extend(store.flat_row(i));
    }
    Matrix {
        rows: n,
        cols: w,
        data,
    }
}

/// Splits a flattened matrix back into per-sample, per-feature vectors.
pub fn unflatten(x: &Matrix, n_features: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    if n_features == 0 || x.cols % n_features != 0 {
        return Err(Error::Dimension {
            expected: n_features,
            got: x.cols,
        });
    }
    let dim = x.cols / n_features;
    Ok((0..x.rows)
        .map(|i| x.row(i).chunks(dim).map(<[f64]>::to_vec).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    /// Population standard deviations, with near-zero values replaced by 1.
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows == 0 {
            return Err(Error::EmptyInput("standardise needs at least one row"));
        }
        let n = x.rows as f64;
        let mut means = vec![0.0; x.cols];
        for i in 0..x.rows {
            for (m, v) in means.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols];
        for i in 0..x.rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        let stds = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < STD_GUARD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { means, stds })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.means.len() {
            return Err(Error::Dimension {
                expected: self.means.len(),
                got: x.cols,
            });
        }
        let mut data = x.data.clone();
        for row in data.chunks_mut(x.cols.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.means).zip(&self.stds) {
                *v = (*v - m) / s;
            }
        }
        Matrix::new(x.rows, x.cols, data)
    }
}

pub fn standardize_fit_transform(x: &Matrix) -> Result<(Matrix, Standardizer)> {
    let s = Standardizer::fit(x)?;
    Ok((s.transform(x)?, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub input_width: usize,
    /// Column means of the fitted data, subtracted before projecting.
    pub center: Vec<f64>,
    /// Row-major `n_components × input_width`, orthonormal rows.
    pub components: Vec<f64>,
    pub n_components: usize,
    pub explained_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn component(&self, k: usize) -> &[f64] {
        &self.components[k * self.input_width..(k + 1) * self.input_width]
    }

    /// `x` centred and multiplied by the first `n_c` components.
    pub fn project(&self, x: &Matrix, n_c: usize) -> Result<Matrix> {
        if x.cols != self.input_width {
            return Err(Error::Dimension {
                expected: self.input_width,
                got: x.cols,
            });
        }
        if n_c == 0 || n_c > self.n_components {
            return Err(Error::Config(format!(
                "{n_c} components requested, {} available",
                self.n_components
            )));
        }
        let mut xc = x.to_na();
        for (j, m) in self.center.iter().enumerate() {
            xc.column_mut(j).add_scalar_mut(-m);
        }
        let c = DMatrix::from_row_slice(
            n_c,
            self.input_width,
            &self.components[..n_c * self.input_width],
        );
        let z = xc * c.transpose();
        Matrix::new(z.nrows(), z.ncols(), z.transpose().as_slice().to_vec())
    }

    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, z: &Matrix) -> Result<Matrix> {
        let n_c = z.cols;
        if n_c == 0 || n_c > self.n_components {
            return Err(Error::Config(format!("{n_c} components out of range")));
        }
        let c = DMatrix::from_row_slice(
            n_c,
            self.input_width,
            &self.components[..n_c * self.input_width],
        );
        let mut x = z.to_na() * c;
        for (j, m) in self.center.iter().enumerate() {
            x.column_mut(j).add_scalar_mut(*m);
        }
        Matrix::new(x.nrows(), x.ncols(), x.transpose().as_slice().to_vec())
    }

    pub fn write_scree_csv<W: Write>(&self, out: W, knee: Option<usize>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["component", "ratio", "cumulative", "knee"])?;
        let mut cum = 0.0;
        for (k, r) in self.explained_ratio.iter().enumerate() {
            cum += r;
            w.write_record([
                (k + 1).to_string(),
                r.to_string(),
                cum.to_string(),
                (knee == Some(k + 1)).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Principal components of `x` by singular value decomposition of the
/// column-centred matrix. Each component's largest-magnitude entry is made
/// positive.
pub fn fit_pca(x: &Matrix) -> Result<PcaModel> {
    if x.rows < 2 {
        return Err(Error::TooFewSamples(format!(
            "PCA needs 2 samples, got {}",
            x.rows
        )));
    }
    if !x.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite PCA input".into()));
    }
    let mut m = x.to_na();
    let mut center = Vec::with_capacity(x.cols);
    for j in 0..x.cols {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
        center.push(mean);
    }
    let svd = m.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD produced no right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let k = order.len();
    let mut components = Vec::with_capacity(k * x.cols);
    let mut explained_ratio = Vec::with_capacity(k);
    for &r in &order {
        let mut row: Vec<f64> = v_t.row(r).iter().copied().collect();
        let pivot = row
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &v)| {
                if v.abs() > bv {
                    (i, v.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        if row[pivot] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend(row);
        let s = svd.singular_values[r];
        explained_ratio.push(if total > 0.0 { s * s / total } else { 0.0 });
    }
    Ok(PcaModel {
        input_width: x.cols,
        center,
        components,
        n_components: k,
        explained_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    /// Number of components up to and including the elbow.
    pub n_components: usize,
    pub distance: f64,
    pub low_confidence: bool,
}

/// Simplified kneedle on a decreasing scree curve.
pub fn kneedle_elbow(ratios: &[f64]) -> Result<Knee> {
    let n = ratios.len();
    if n < 3 {
        return Err(Error::TooFewSamples(format!(
            "kneedle needs 3 points, got {n}"
        )));
    }
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
            (lo.min(r), hi.max(r))
        });
    if !(hi - lo > 0.0) {
        return Err(Error::Numerical("no knee: constant curve".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &r) in ratios.iter().enumerate() {
        let x = i as f64 / (n - 1) as f64;
        let y = 1.0 - (r - lo) / (hi - lo);
        let diff = y - x;
        if diff > best.1 {
            best = (i, diff);
        }
    }
    let low_confidence = best.1 < LOW_CONFIDENCE;
    if low_confidence {
        warn!("weak elbow: largest kneedle distance {:.3e}", best.1);
    }
    Ok(Knee {
        n_components: best.0 + 1,
        distance: best.1,
        low_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardise_columns() {
        let x = Matrix::new(2, 2, vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let (z, s) = standardize_fit_transform(&x).unwrap();
        assert_eq!(z.data, vec![-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.stds, vec![1.0, 1.0]);
    }

    #[test]
    fn line_has_single_component() {
        let x = Matrix::new(4, 2, vec![0.0, 0.0, 1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        let m = fit_pca(&x).unwrap();
        assert!((m.explained_ratio[0] - 1.0).abs() < 1e-12);
        let z = m.project(&x, 1).unwrap();
        let back = m.reconstruct(&z).unwrap();
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kneedle_fixture() {
        let k = kneedle_elbow(&[0.5, 0.3, 0.1, 0.05, 0.03, 0.02]).unwrap();
        assert_eq!(k.n_components, 3);
        assert!(!k.low_confidence);
        let lin: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 0.1).collect();
        assert!(kneedle_elbow(&lin).unwrap().low_confidence);
        assert!(kneedle_elbow(&[0.2; 5]).is_err());
        assert!(kneedle_elbow(&[0.6, 0.4]).is_err());
    }

    #[test]
    fn flatten_round_trip_shape() {
        let x = Matrix::new(2, 6, (0..12).map(f64::from).collect()).unwrap();
        let u = unflatten(&x, 3).unwrap();
        assert_eq!(u[1][2], vec![10.0, 11.0]);
    }
}

//! Inter-feature cosine-similarity divergence between the raw and the
//! compressed embedding spaces.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KL_EPSILON: f64 = 1e-12;

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            got: v.len(),
        });
    }
    piiscan_autograd::cosine(u, v)
        .ok_or_else(|| Error::Numerical("cosine of a zero-norm vector".into()))
}

/// Wasserstein-1 distance between two empirical distributions, i.e. the
/// integral of the absolute difference of their CDFs.
pub fn wasserstein1(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::EmptyInput(
            "wasserstein1 needs two non-empty samples",
        ));
    }
    if !u.iter().chain(v).all(|x| x.is_finite()) {
        return Err(Error::Numerical("non-finite sample".into()));
    }
    let mut a = u.to_vec();
    let mut b = v.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        // integer CDF counts keep the sum exact for small integer inputs
        total += (i as f64 * nb - j as f64 * na).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total / (na * nb))
}

/// Maps similarities in [-1, 1] to a probability vector: shift by one, add
/// [`KL_EPSILON`], normalise.
pub fn to_distribution(s: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = s.iter().map(|x| x + 1.0 + KL_EPSILON).collect();
    let total: f64 = shifted.iter().sum();
    shifted.into_iter().map(|x| x / total).collect()
}

/// KL(U ‖ V) in nats after mapping both to distributions.
pub fn kl_divergence(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            got: v.len(),
        });
    }
    if u.is_empty() {
        return Err(Error::EmptyInput("kl_divergence needs non-empty vectors"));
    }
    let (p, q) = (to_distribution(u), to_distribution(v));
    let kl = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>();
    if !kl.is_finite() {
        return Err(Error::Numerical("non-finite KL divergence".into()));
    }
    Ok(kl)
}

/// Cosine similarity of each centroid to every other, self excluded.
pub fn similarity_profiles(centroids: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = centroids.len();
    let mut sims = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in a + 1..d {
            let c = cosine(&centroids[a], &centroids[b])?;
            sims[a][b] = c;
            sims[b][a] = c;
        }
    }
    Ok(sims
        .into_iter()
        .enumerate()
        .map(|(a, row)| {
            row.into_iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(_, c)| c)
                .collect()
        })
        .collect())
}

/// Full d × d cosine matrix with ones on the diagonal.
pub fn similarity_matrix(centroids: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = centroids.len();
    let mut sims = vec![vec![1.0; d]; d];
    for a in 0..d {
        for b in a + 1..d {
            let c = cosine(&centroids[a], &centroids[b])?;
            sims[a][b] = c;
            sims[b][a] = c;
        }
    }
    Ok(sims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Wd,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionRule {
    Threshold { tau: f64 },
    TopK { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub features: Vec<String>,
    pub wd: Vec<f64>,
    pub kl: Vec<f64>,
    /// 1-based rank per feature, highest score first.
    pub rank_wd: Vec<usize>,
    pub rank_kl: Vec<usize>,
}

fn ranks(scores: &[f64], names: &[String]) -> Vec<usize> {
    let order = ordering(scores, names);
    let mut rank = vec![0; scores.len()];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r + 1;
    }
    rank
}

/// Feature indices by descending score, ties broken by name.
fn ordering(scores: &[f64], names: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| names[a].cmp(&names[b]))
    });
    order
}

impl DivergenceReport {
    pub fn scores(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Wd => &self.wd,
            Metric::Kl => &self.kl,
        }
    }

    pub fn order(&self, metric: Metric) -> Vec<usize> {
        ordering(self.scores(metric), &self.features)
    }

    pub fn write_csv<W: Write>(
        &self,
        out: W,
        selected_wd: &[usize],
        selected_kl: &[usize],
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "feature",
            "wd",
            "kl",
            "rank_wd",
            "rank_kl",
            "selected_wd",
            "selected_kl",
        ])?;
        for j in 0..self.features.len() {
            w.write_record([
                self.features[j].clone(),
                self.wd[j].to_string(),
                self.kl[j].to_string(),
                self.rank_wd[j].to_string(),
                self.rank_kl[j].to_string(),
                selected_wd.contains(&j).to_string(),
                selected_kl.contains(&j).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn divergence_report(
    features: &[String],
    raw_profiles: &[Vec<f64>],
    compressed_profiles: &[Vec<f64>],
) -> Result<DivergenceReport> {
    let d = features.len();
    if raw_profiles.len() != d || compressed_profiles.len() != d {
        return Err(Error::Dataset(format!(
            "profiles for {} and {} features do not match {d} names",
            raw_profiles.len(),
            compressed_profiles.len()
        )));
    }
    let mut wd = Vec::with_capacity(d);
    let mut kl = Vec::with_capacity(d);
    for (u, v) in raw_profiles.iter().zip(compressed_profiles) {
        if u.len() != v.len() {
            return Err(Error::Dataset("misaligned similarity profiles".into()));
        }
        if u.is_empty() {
            wd.push(0.0);
            kl.push(0.0);
            continue;
        }
        wd.push(wasserstein1(u, v)?);
        kl.push(kl_divergence(u, v)?);
    }
    Ok(DivergenceReport {
        features: features.to_vec(),
        rank_wd: ranks(&wd, features),
        rank_kl: ranks(&kl, features),
        wd,
        kl,
    })
}

/// Report over the centroids of a raw and a compressed store.
pub fn report_from_centroids(
    features: &[String],
    raw: &[Vec<f64>],
    compressed: &[Vec<f64>],
) -> Result<DivergenceReport> {
    divergence_report(
        features,
        &similarity_profiles(raw)?,
        &similarity_profiles(compressed)?,
    )
}

pub fn select_features(
    report: &DivergenceReport,
    metric: Metric,
    rule: SelectionRule,
) -> Result<Vec<usize>> {
    let scores = report.scores(metric);
    let order = report.order(metric);
    match rule {
        SelectionRule::Threshold { tau } => {
            Ok(order.into_iter().filter(|&j| scores[j] > tau).collect())
        }
        SelectionRule::TopK { k } => {
            if k > order.len() {
                return Err(Error::Config(format!(
                    "top_k {k} exceeds {} features",
                    order.len()
                )));
            }
            Ok(order.into_iter().take(k).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn wasserstein_cases() {
        assert_eq!(wasserstein1(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(
            wasserstein1(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(),
            3.0
        );
        assert!(wasserstein1(&[], &[1.0]).is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_divergence(&[0.2, -0.4], &[0.2, -0.4]).unwrap(), 0.0);
        // shifted to [1, 1] and [0.5, 1.5], i.e. [0.5, 0.5] and [0.25, 0.75]
        let got = kl_divergence(&[0.0, 0.0], &[-0.5, 0.5]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((want - 0.14384).abs() < 1e-5);
        assert!(kl_divergence(&[0.0], &[0.0, 1.0]).is_err());
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn identical_profiles_score_zero() {
        let c = vec![
            vec![1.0, 0.2, 0.0],
            vec![0.1, 1.0, 0.3],
            vec![0.4, 0.0, 1.0],
        ];
        let r = report_from_centroids(&names(3), &c, &c).unwrap();
        assert!(r.wd.iter().chain(&r.kl).all(|&s| s == 0.0));
        // ties fall back to name order
        assert_eq!(r.rank_wd, vec![1, 2, 3]);
    }

    #[test]
    fn selection_rules() {
        let r = DivergenceReport {
            features: names(4),
            wd: vec![3.0, 5.0, 2.0, 4.0],
            kl: vec![0.0; 4],
            rank_wd: vec![3, 1, 4, 2],
            rank_kl: vec![1, 2, 3, 4],
        };
        assert_eq!(
            select_features(&r, Metric::Wd, SelectionRule::TopK { k: 3 }).unwrap(),
            vec![1, 3, 0]
        );
        assert_eq!(
            select_features(&r, Metric::Wd, SelectionRule::TopK { k: 4 })
                .unwrap()
                .len(),
            4
        );
        assert!(select_features(&r, Metric::Wd, SelectionRule::TopK { k: 5 }).is_err());
        assert!(
            select_features(&r, Metric::Wd, SelectionRule::Threshold { tau: 9.0 })
                .unwrap()
                .is_empty()
        );
        assert_eq!(
            select_features(&r, Metric::Wd, SelectionRule::Threshold { tau: 3.5 }).unwrap(),
            vec![1, 3]
        );
    }
}

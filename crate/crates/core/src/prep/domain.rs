//! Domain selection heuristic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::flow::{split_uri, FlowRecord};

pub const DEFAULT_WORD_COUNT_THRESHOLD: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain: String,
    pub n0: usize,
    pub n1: usize,
    pub wc: usize,
}

/// Distinct tokens across the given strings, splitting on every
/// non-alphanumeric character.
pub fn word_count<'a>(strings: impl IntoIterator<Item = &'a str>) -> usize {
    let mut tokens = BTreeSet::new();
    for s in strings {
        for t in s.split(|c: char| !c.is_alphanumeric()) {
            if !t.is_empty() {
                tokens.insert(t);
            }
        }
    }
    tokens.len()
}

/// Token vocabulary size of one domain's flows: query, header and body keys
/// and values.
pub fn domain_word_count(records: &[&FlowRecord]) -> usize {
    let mut strings: Vec<&str> = Vec::new();
    for r in records {
        let (_, query) = split_uri(&r.uri);
        for (k, v) in query {
            strings.push(k);
            strings.push(v);
        }
        for (k, v) in r.headers.iter().chain(&r.body_kv) {
            strings.push(k);
            strings.push(v);
        }
    }
    word_count(strings)
}

/// Per-domain class counts and word counts, sorted by domain name.
pub fn domain_stats(records: &[FlowRecord]) -> Vec<DomainStats> {
    let mut groups: BTreeMap<&str, Vec<&FlowRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.domain.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(domain, rs)| {
            let n1 = rs.iter().filter(|r| r.is_leak()).count();
            DomainStats {
                domain: domain.to_string(),
                n0: rs.len() - n1,
                n1,
                wc: domain_word_count(&rs),
            }
        })
        .collect()
}

/// Keeps a domain iff it has both classes, `T >= 2`, more than one leak and
/// a word count strictly above `thres`. `T` is `n0 + n1` unless
/// `literal_total` asks for the `n0 + n0` reading.
pub fn select_domains(
    stats: &[DomainStats],
    thres: usize,
    literal_total: bool,
) -> BTreeSet<String> {
    stats
        .iter()
        .filter(|s| {
            let total = if literal_total {
                s.n0 + s.n0
            } else {
                s.n0 + s.n1
            };
            s.n1 > 0 && s.n0 > 0 && total >= 2 && s.n1 > 1 && s.wc > thres
        })
        .map(|s| s.domain.clone())
        .collect()
}

use std::collections::BTreeSet;

use indexmap::IndexMap;
use piiscan::classifier::split_metrics;
use piiscan::embed::{
    build_store, CentroidMode, EmbeddingStore, HashEmbedder, Provider, ProviderConfig,
};
use piiscan::flow::{parse_flow_stream, write_records};
use piiscan::ifcs::{kl_divergence, wasserstein1};
use piiscan::pca::Matrix;
use piiscan::prep::balance::plan;
use piiscan::prep::{balance_indices, kfold_split, BalanceConfig, FoldSplit};
use piiscan::synth::{generate, SynthConfig};
use piiscan::table::tabularize;
use piiscan::FlowRecord;
use proptest::prelude::*;

fn labels(n0: usize, n1: usize) -> Vec<bool> {
    (0..n0 + n1).map(|i| i >= n0).collect()
}

/// Class size after applying a signed change: growth duplicates rows of a
/// non-empty class, shrinkage keeps `n0 + n1 + delta` rows capped at `n`.
fn expected_size(n: usize, total: usize, delta: i64) -> i64 {
    match delta {
        d if d > 0 && n == 0 => 0,
        d if d > 0 => n as i64 + d,
        d if d < 0 => (total as i64 + d).clamp(0, n as i64),
        _ => n as i64,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_every_index(n0 in 5usize..120, n1 in 5usize..120, k in 2usize..11, seed in 0u64..1000) {
        let labels = labels(n0, n1);
        let split = kfold_split(&labels, k, 0.2, seed).unwrap();
        prop_assert_eq!(split.k(), k);
        let mut all: Vec<usize> = split.pool();
        all.extend(&split.test_indices);
        all.sort_unstable();
        prop_assert_eq!(all, (0..n0 + n1).collect::<Vec<_>>());
        let sizes: Vec<usize> = split.fold_indices.iter().map(Vec::len).collect();
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 2, "fold sizes {:?}", sizes);
        for f in 0..k {
            let train: BTreeSet<usize> = split.train_indices(f).into_iter().collect();
            prop_assert!(split.fold_indices[f].iter().all(|i| !train.contains(i)));
        }
        let mut buf = Vec::new();
        split.write_csv(&mut buf).unwrap();
        prop_assert_eq!(FoldSplit::read_csv(buf.as_slice()).unwrap(), split);
    }

    #[test]
    fn test_split_is_stratified(n0 in 20usize..200, n1 in 20usize..200, seed in 0u64..1000) {
        let labels = labels(n0, n1);
        let split = kfold_split(&labels, 5, 0.2, seed).unwrap();
        let pos = split.test_indices.iter().filter(|&&i| labels[i]).count() as f64;
        let neg = split.test_indices.len() as f64 - pos;
        prop_assert!((pos - 0.2 * n1 as f64).abs() <= 1.0);
        prop_assert!((neg - 0.2 * n0 as f64).abs() <= 1.0);
    }

    #[test]
    fn balanced_counts_follow_the_plan(n0 in 0usize..150, n1 in 0usize..150, m in 1usize..300, seed in 0u64..100) {
        prop_assume!(n0 + n1 > 0);
        let cfg = BalanceConfig { folds: 10, aggressive_threshold: m, seed };
        let labels = labels(n0, n1);
        let rows = balance_indices(&labels, &cfg).unwrap();
        let p = plan(n0, n1, 10, m);
        let c1 = rows.iter().filter(|&&i| labels[i]).count() as i64;
        let c0 = rows.len() as i64 - c1;
        prop_assert_eq!(c0, expected_size(n0, n0 + n1, p.delta0));
        prop_assert_eq!(c1, expected_size(n1, n0 + n1, p.delta1));
        prop_assert!(rows.iter().all(|&i| i < n0 + n1));
    }

    #[test]
    fn wasserstein_is_a_metric_on_samples(
        u in prop::collection::vec(-5.0f64..5.0, 1..30),
        v in prop::collection::vec(-5.0f64..5.0, 1..30),
        w in prop::collection::vec(-5.0f64..5.0, 1..30),
        shift in -3.0f64..3.0,
    ) {
        let d = |a: &[f64], b: &[f64]| wasserstein1(a, b).unwrap();
        prop_assert!(d(&u, &u).abs() < 1e-12);
        prop_assert!((d(&u, &v) - d(&v, &u)).abs() < 1e-9);
        prop_assert!(d(&u, &w) <= d(&u, &v) + d(&v, &w) + 1e-9);
        let moved: Vec<f64> = u.iter().map(|x| x + shift).collect();
        prop_assert!((d(&u, &moved) - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_inputs(
        u in prop::collection::vec(-1.0f64..1.0, 2..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
    ) {
        let v: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| (a + b).clamp(-1.0, 1.0)).collect();
        prop_assert!(kl_divergence(&u, &v).unwrap() >= -1e-15);
        prop_assert!(kl_divergence(&u, &u).unwrap().abs() < 1e-15);
    }

    #[test]
    fn split_metrics_match_confusion_counts(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let pred = Matrix::new(bits.len(), 1, bits.iter().map(|b| b.0 as u8 as f64).collect()).unwrap();
        let truth = Matrix::new(bits.len(), 1, bits.iter().map(|b| b.1 as u8 as f64).collect()).unwrap();
        let m = split_metrics(&pred, &truth).unwrap();
        let count = |p: bool, t: bool| bits.iter().filter(|b| b.0 == p && b.1 == t).count() as f64;
        let (tp, fp, fnn, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
        prop_assert_eq!(m.accuracy, (tp + tn) / bits.len() as f64);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        prop_assert_eq!(m.precision, precision);
        prop_assert_eq!(m.recall, recall);
        prop_assert_eq!(m.precision_undefined, tp + fp == 0.0);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        prop_assert!((m.f1 - f1).abs() < 1e-12);
    }

    #[test]
    fn hash_embeddings_are_unit_norm_and_deterministic(text in "\\PC{0,24}", seed in 0u64..50) {
        let h = HashEmbedder::new(&[3, 4], seed);
        let v = h.embed(&text);
        prop_assert_eq!(v.len(), 384);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        prop_assert_eq!(v, HashEmbedder::new(&[3, 4], seed).embed(&text));
    }

    #[test]
    fn flow_records_round_trip(
        domain in "[a-z]{1,10}\\.(com|net)",
        port in any::<u16>(),
        path in "/[a-z0-9/]{0,12}",
        kv in prop::collection::vec(("[a-z_]{1,8}", "\\PC{0,12}"), 0..5),
        ts in any::<u64>(),
        label in any::<Option<bool>>(),
    ) {
        let record = FlowRecord {
            app_id: "com.example.app".into(),
            domain,
            dst_ip: "10.0.0.1".into(),
            dst_port: port,
            method: "POST".into(),
            uri: path,
            headers: IndexMap::from([("User-Agent".to_string(), "probe/1.0".to_string())]),
            body_kv: kv.into_iter().collect(),
            timestamp_ms: ts,
            label,
            pii_types: label.map(|l| if l { BTreeSet::from(["imei".to_string()]) } else { BTreeSet::new() }),
        };
        let mut buf = Vec::new();
        write_records(std::slice::from_ref(&record), &mut buf).unwrap();
        prop_assert_eq!(parse_flow_stream(buf.as_slice()).unwrap(), vec![record]);
    }
}

#[test]
fn embedding_store_round_trips_through_bytes() {
    let records = generate(&SynthConfig {
        n_flows: 60,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = tabularize(&records).unwrap();
    let provider = Provider::from_config(&ProviderConfig::default()).unwrap();
    for mode in [CentroidMode::Values, CentroidMode::Names] {
        let store = build_store(&ds, &provider, mode).unwrap();
        let mut buf = Vec::new();
        store.write(&mut buf).unwrap();
        let back = EmbeddingStore::read(buf.as_slice()).unwrap();
        assert_eq!(back.feature_names(), store.feature_names());
        assert_eq!(back.pool(), store.pool());
        assert_eq!(back.centroids(), store.centroids());
        for i in 0..ds.n_samples() {
            assert_eq!(back.flat_row(i), store.flat_row(i));
        }
    }
}

#[test]
fn balancing_is_seeded() {
    let labels = labels(40, 12);
    let a = |seed| {
        balance_indices(
            &labels,
            &BalanceConfig {
                seed,
                ..BalanceConfig::default()
            },
        )
        .unwrap()
    };
    assert_eq!(a(3), a(3));
    assert_ne!(a(3), a(4));
}

//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! test fails if any check fails.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use piiscan::autoencoder::{train_ae, AeConfig, Autoencoder};
use piiscan::classifier::{EvalMode, EvalReport, MlpConfig, MlpModel};
use piiscan::embed::HashEmbedder;
use piiscan::flow::{parse_flow_stream, write_records};
use piiscan::ft::{train_ft, FeatureTokenizer, FtConfig, FtModel, FtVariant};
use piiscan::ifcs::{kl_divergence, wasserstein1};
use piiscan::pca::{fit_pca, kneedle_elbow, Matrix};
use piiscan::pipeline::{
    run_pipeline, run_stage, run_sweep, targets, Artifact, FinetuneSummary, Layout, PipelineConfig,
    Stage,
};
use piiscan::prep::{balance_indices, oversample, undersample, BalanceConfig, FoldSplit};
use piiscan::synth::{generate, SynthConfig};
use piiscan::table::{read_dataset, tabularize, write_dataset, Column, TabularDataset};
use piiscan::triplet::ProjectionModel;
use piiscan_autograd::{
    grad_check, grad_check_params, Graph, ParamStore, Result as AgResult, Tensor, TripletSemantics,
    Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Run {
    dir: tempfile::TempDir,
    report: EvalReport,
    elapsed: f64,
}

fn layout(run: &Run) -> Layout {
    Layout::single(run.dir.path())
}

fn pipeline_run() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let t = Instant::now();
    let report = run_pipeline(&cfg, &Layout::single(dir.path())).unwrap();
    Run {
        dir,
        report,
        elapsed: t.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------------------

fn sweep_grid() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.synth.n_flows = 400;
    cfg.autoencoder.epochs = 20;
    cfg.finetune.epochs = 20;
    cfg.classifier.mlp.max_epochs = 20;
    let rows = run_sweep(&cfg, dir.path()).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).map_err(|e| e.to_string())?;
    let names: BTreeSet<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    ensure(
        rows.len() == 16 && names.len() == 16 && csv.lines().count() == 17,
        format!("{} grid rows written (no tolerance on values)", rows.len()),
    )
}

fn end_to_end(run: &Run) -> Check {
    let l = layout(run);
    let ds = read_dataset(&l.path(Artifact::Dataset)).map_err(|e| e.to_string())?;
    let leaks = ds.class_count(true);
    let types: BTreeSet<&String> = ds.pii_types().iter().flatten().collect();
    let shape_ok =
        ds.n_samples() == 2000 && leaks == 800 && ds.n_features() == 30 && types.len() == 6;
    let val = run.report.mean_val.accuracy;
    let test = run.report.test.accuracy;
    ensure(
        shape_ok && val >= 0.90 && test >= 0.88 && run.elapsed < 600.0,
        format!(
            "{} flows, {} leaks, {} features, {} types; mean val {val:.4}, test {test:.4}, {:.1} s",
            ds.n_samples(),
            leaks,
            ds.n_features(),
            types.len(),
            run.elapsed
        ),
    )
}

// ---------------------------------------------------------------------------

const GC_TOL: f64 = 1e-4;
const GC_EPS: f64 = 1e-5;
const GC_INSTANCES: u64 = 20;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> AgResult<Var> {
    let t = g.value(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, t.rows(), t.cols(), -1.0, 1.0);
    let w = g.input(w)?;
    let m = g.mul(out, w)?;
    g.sum(m)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> AgResult<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<(usize, usize)>, (f64, f64), OpFn)> {
    let target = Tensor::from_matrix(4, 3, (0..12).map(|i| (i % 2) as f64).collect()).unwrap();
    vec![
        (
            "add",
            vec![(3, 4), (3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![(3, 4), (3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![(3, 4), (3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "scale",
            vec![(3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.scale(v[0], 1.7)),
        ),
        (
            "relu",
            vec![(4, 5)],
            (-1.0, 1.0),
            Box::new(|g, v| g.relu(v[0])),
        ),
        (
            "gelu",
            vec![(4, 5)],
            (-3.0, 3.0),
            Box::new(|g, v| g.gelu(v[0])),
        ),
        (
            "sigmoid",
            vec![(4, 5)],
            (-4.0, 4.0),
            Box::new(|g, v| g.sigmoid(v[0])),
        ),
        (
            "matmul",
            vec![(3, 4), (4, 2)],
            (-1.0, 1.0),
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_t",
            vec![(3, 4), (5, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.matmul_t(v[0], v[1])),
        ),
        (
            "add_row",
            vec![(3, 4), (1, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        (
            "mul_row",
            vec![(3, 4), (1, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.mul_row(v[0], v[1])),
        ),
        (
            "transpose",
            vec![(3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.transpose(v[0])),
        ),
        (
            "softmax",
            vec![(3, 6)],
            (-2.0, 2.0),
            Box::new(|g, v| g.softmax(v[0])),
        ),
        (
            "layer_norm",
            vec![(3, 8)],
            (-2.0, 2.0),
            Box::new(|g, v| g.layer_norm(v[0])),
        ),
        (
            "concat_rows",
            vec![(2, 3), (4, 3)],
            (-1.0, 1.0),
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        (
            "concat_cols",
            vec![(3, 2), (3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        (
            "slice_rows",
            vec![(5, 3)],
            (-1.0, 1.0),
            Box::new(|g, v| g.slice_rows(v[0], 1, 3)),
        ),
        (
            "slice_cols",
            vec![(3, 5)],
            (-1.0, 1.0),
            Box::new(|g, v| g.slice_cols(v[0], 2, 2)),
        ),
        (
            "gather_rows",
            vec![(4, 3)],
            (-1.0, 1.0),
            Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 3, 1])),
        ),
        (
            "dropout",
            vec![(3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.dropout(v[0], 0.25)),
        ),
        (
            "sum",
            vec![(3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.sum(v[0])),
        ),
        (
            "mean",
            vec![(3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.mean(v[0])),
        ),
        (
            "sum_abs",
            vec![(3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.sum_abs(v[0])),
        ),
        (
            "sum_squares",
            vec![(3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.sum_squares(v[0])),
        ),
        (
            "mse",
            vec![(3, 4), (3, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.mse(v[0], v[1])),
        ),
        (
            "bce",
            vec![(4, 3)],
            (0.05, 0.95),
            Box::new(move |g, v| g.bce(v[0], &target)),
        ),
        (
            "triplet_corrected",
            vec![(3, 5), (3, 5), (3, 5)],
            (-1.0, 1.0),
            Box::new(|g, v| g.triplet_cosine(v[0], v[1], v[2], 3.0, TripletSemantics::Corrected)),
        ),
        (
            "triplet_literal",
            vec![(3, 5), (3, 5), (3, 5)],
            (-1.0, 1.0),
            Box::new(|g, v| g.triplet_cosine(v[0], v[1], v[2], 3.0, TripletSemantics::Literal)),
        ),
        (
            "attention",
            vec![(6, 4), (6, 4), (6, 4)],
            (-1.0, 1.0),
            Box::new(|g, v| g.attention(v[0], v[1], v[2], 3, 2)),
        ),
    ]
}

fn ft_fixture(seed: u64) -> (FtModel, piiscan::ft::FtBatch, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let cols = vec![
        Column::Numerical((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()),
        Column::Categorical((0..n).map(|i| ["a", "b", "c"][i % 3].to_string()).collect()),
        Column::Categorical((0..n).map(|i| ["a", "d"][i % 2].to_string()).collect()),
    ];
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let ds = TabularDataset::new(
        vec!["x".into(), "u".into(), "v".into()],
        cols,
        labels,
        vec![BTreeSet::new(); n],
    )
    .unwrap();
    let rows: Vec<usize> = (0..n).collect();
    let tok = FeatureTokenizer::fit(&ds, &rows).unwrap();
    let cfg = FtConfig {
        dim: 4,
        heads: 2,
        ..FtConfig::default()
    };
    let model = FtModel::new(tok, cfg, seed).unwrap();
    let batch = model.tokenizer.batch(&ds, &rows).unwrap();
    let y = ds.labels().iter().map(|&l| l as u8 as f64).collect();
    (model, batch, y)
}

/// Moves every parameter off its initial value so zero biases do not park
/// ReLU inputs exactly on the kink.
fn jitter(store: &ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = store.clone();
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        for v in s.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    s
}

fn model_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let ae = Autoencoder::new(&[8, 5, 3], seed);
    let x = random(&mut rng, 4, 8, -1.0, 1.0);
    let mut store = jitter(ae.params(), &mut rng);
    let err = grad_check_params(
        |g, s| {
            let xi = g.input(x.clone())?;
            let h = ae.encoder().forward(g, s, xi)?;
            let r = ae.decoder().forward(g, s, h)?;
            g.mse(r, xi)
        },
        &mut store,
        GC_EPS,
    )
    .unwrap();
    out.push(("autoencoder", err));

    let pm = ProjectionModel::new(4, 6, seed);
    let c = random(&mut rng, 5, 4, -1.0, 1.0);
    let mut store = jitter(pm.params(), &mut rng);
    let err = grad_check_params(
        |g, s| {
            let ci = g.input(c.clone())?;
            let p = pm.mlp().forward(g, s, ci)?;
            let a = g.gather_rows(p, &[0, 1, 2])?;
            let pos = g.gather_rows(p, &[1, 3, 4])?;
            let neg = g.gather_rows(p, &[4, 2, 0])?;
            g.triplet_cosine(a, pos, neg, 3.0, TripletSemantics::Corrected)
        },
        &mut store,
        GC_EPS,
    )
    .unwrap();
    out.push(("projection_head", err));

    let mlp_cfg = MlpConfig {
        hidden: vec![6, 4],
        ..MlpConfig::default()
    };
    let mlp = MlpModel::new(5, 2, &mlp_cfg, seed);
    let x = random(&mut rng, 6, 5, -1.0, 1.0);
    let y = Tensor::from_matrix(
        6,
        2,
        (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect(),
    )
    .unwrap();
    let mut store = jitter(mlp.params(), &mut rng);
    let err = grad_check_params(
        |g, s| {
            let xi = g.input(x.clone())?;
            let p = mlp.mlp().forward(g, s, xi)?;
            g.bce(p, &y)
        },
        &mut store,
        GC_EPS,
    )
    .unwrap();
    out.push(("mlp", err));

    let (ft, batch, y) = ft_fixture(seed);
    let mut store = jitter(ft.params(), &mut rng);
    let err = grad_check_params(
        |g, s| {
            ft.loss(g, s, &batch, &y)
                .map(|(l, _, _)| l)
                .map_err(|e| piiscan_autograd::AutogradError::Invalid(e.to_string()))
        },
        &mut store,
        GC_EPS,
    )
    .unwrap();
    out.push(("ft_block", err));
    out
}

fn gradient_verification() -> Check {
    let t = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, shapes, range, f) in op_cases() {
        let mut w: f64 = 0.0;
        for seed in 0..GC_INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|&(r, c)| random(&mut rng, r, c, range.0, range.1))
                .collect();
            let e = grad_check(
                |g, v| {
                    let out = f(g, v)?;
                    if g.value(out).len() == 1 {
                        Ok(out)
                    } else {
                        weighted_sum(g, out, seed)
                    }
                },
                &inputs,
                GC_EPS,
            )
            .unwrap();
            w = w.max(e);
        }
        worst.push((name.to_string(), w));
    }
    let mut models: Vec<(String, f64)> = Vec::new();
    for seed in 0..GC_INSTANCES {
        for (name, e) in model_errors(seed) {
            match models.iter_mut().find(|(n, _)| n == name) {
                Some(m) => m.1 = m.1.max(e),
                None => models.push((name.to_string(), e)),
            }
        }
    }
    worst.extend(models);
    let elapsed = t.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<String> = worst
        .iter()
        .filter(|w| !(w.1 < GC_TOL))
        .map(|w| format!("{}={:.2e}", w.0, w.1))
        .collect();
    ensure(
        failing.is_empty() && elapsed < 60.0,
        format!("{} checks x {GC_INSTANCES} instances, max rel error {max:.2e}, {elapsed:.1} s {failing:?}", worst.len()),
    )
}

// ---------------------------------------------------------------------------

/// Straight-line transcription of the balancing procedure.
fn reference_balance(n0: usize, n1: usize, f: i64, m: i64, seed: u64) -> Vec<usize> {
    let rows0: Vec<usize> = (0..n0).collect();
    let rows1: Vec<usize> = (n0..n0 + n1).collect();
    let (a, b) = (n0 as i64, n1 as i64);
    let (dn0, dn1);
    if a < f && b < f {
        dn0 = f - a;
        dn1 = f - b;
    } else if b > a {
        dn0 = b - a;
        dn1 = 0;
    } else if a > m {
        dn0 = m - a;
        dn1 = 0;
    } else if a > 100 {
        if b > 100 {
            dn0 = 100 - a;
            dn1 = 0;
        } else {
            dn1 = 100 - b;
            dn0 = 100 - a;
        }
    } else {
        dn0 = 0;
        dn1 = a - b;
    }
    let mut out0 = rows0.clone();
    if dn0 > 0 && n0 > 0 {
        out0 = oversample(&rows0, dn0 as usize, seed).unwrap();
    }
    if dn0 < 0 {
        out0 = undersample(&rows0, a + b + dn0, seed).unwrap();
    }
    let mut out1 = rows1.clone();
    if dn1 > 0 && n1 > 0 {
        out1 = oversample(&rows1, dn1 as usize, seed + 1).unwrap();
    }
    if dn1 < 0 {
        out1 = undersample(&rows1, a + b + dn1, seed + 1).unwrap();
    }
    out1.into_iter().chain(out0).collect()
}

fn balancing_oracle() -> Check {
    let mut cases = 0;
    for m in [5usize, 5000] {
        let cfg = BalanceConfig {
            folds: 10,
            aggressive_threshold: m,
            seed: 7,
        };
        for n0 in 0..=30 {
            for n1 in 0..=30 {
                if n0 + n1 == 0 {
                    continue;
                }
                let labels: Vec<bool> = (0..n0 + n1).map(|i| i >= n0).collect();
                let mut got = balance_indices(&labels, &cfg).map_err(|e| e.to_string())?;
                let mut want = reference_balance(n0, n1, 10, m as i64, 7);
                if got.len() != want.len() {
                    return Err(format!(
                        "count mismatch at n0={n0} n1={n1} M={m}: {} vs {}",
                        got.len(),
                        want.len()
                    ));
                }
                got.sort_unstable();
                want.sort_unstable();
                if got != want {
                    return Err(format!("row multiset mismatch at n0={n0} n1={n1} M={m}"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} (n0, n1, M) cases match the reference interpreter"
    ))
}

// ---------------------------------------------------------------------------

/// Integrates |F_u - F_v| with one midpoint evaluation per interval of the
/// merged support.
fn w1_oracle(u: &[f64], v: &[f64]) -> f64 {
    let mut pts: Vec<f64> = u.iter().chain(v).copied().collect();
    pts.sort_by(f64::total_cmp);
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&y| y <= x).count() as f64 / s.len() as f64;
    pts.windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            (cdf(u, mid) - cdf(v, mid)).abs() * (w[1] - w[0])
        })
        .sum()
}

fn kl_oracle(u: &[f64], v: &[f64]) -> f64 {
    let zu: f64 = u.iter().map(|x| x + 1.0 + 1e-12).sum();
    let zv: f64 = v.iter().map(|x| x + 1.0 + 1e-12).sum();
    u.iter()
        .zip(v)
        .map(|(a, b)| {
            let p = (a + 1.0 + 1e-12) / zu;
            let q = (b + 1.0 + 1e-12) / zv;
            p * (p.ln() - q.ln())
        })
        .sum()
}

fn divergence_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut w_err, mut k_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let na = rng.gen_range(1..40);
        let nb = rng.gen_range(1..40);
        let u: Vec<f64> = (0..na).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..nb).map(|_| rng.gen_range(-1.0..1.0)).collect();
        w_err = w_err.max((wasserstein1(&u, &v).unwrap() - w1_oracle(&u, &v)).abs());
    }
    for _ in 0..100 {
        let d = rng.gen_range(2..40);
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        k_err = k_err.max((kl_divergence(&u, &v).unwrap() - kl_oracle(&u, &v)).abs());
    }
    let exact = wasserstein1(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    ensure(
        w_err <= 1e-9 && k_err <= 1e-12 && exact == 3.0,
        format!(
            "max W1 error {w_err:.2e}, max KL error {k_err:.2e}, W({{1,2,3}},{{4,5,6}}) = {exact}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn autoencoder_fixture() -> Check {
    let words = [
        "user", "id", "token", "session", "device", "app", "ver", "lang",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let texts: Vec<String> = (0..500)
        .map(|_| {
            format!(
                "{}_{}",
                words[rng.gen_range(0..8)],
                words[rng.gen_range(0..8)]
            )
        })
        .collect();
    let h = HashEmbedder::new(&[3, 4], 7);
    let data: Vec<f64> = texts.iter().flat_map(|t| h.embed(t)).collect();
    let x = Tensor::from_matrix(500, 384, data).unwrap();
    let cfg = AeConfig {
        seed: 7,
        dedup: false,
        ..AeConfig::default()
    };
    let ae = train_ae(&x, &cfg).map_err(|e| e.to_string())?;
    let curve = ae.curve();
    let (first, last) = (curve[0].holdout_mse, curve.last().unwrap().holdout_mse);
    ensure(
        curve.len() <= 201 && last <= 0.1 * first,
        format!(
            "holdout MSE {first:.3e} -> {last:.3e} (ratio {:.4}) over {} epochs",
            last / first,
            curve.len() - 1
        ),
    )
}

fn triplet_efficacy(run: &Run) -> Check {
    let p = layout(run).path(Artifact::FinetuneSummary);
    let s: FinetuneSummary = serde_json::from_slice(&std::fs::read(p).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(
        s.violations_before > 0 && 2 * s.violations_after <= s.violations_before,
        format!(
            "violations {} -> {} over {} triplets, loss {:.4} -> {:.4}",
            s.violations_before, s.violations_after, s.triplets, s.loss_before, s.loss_after
        ),
    )
}

// ---------------------------------------------------------------------------

fn kneedle_recovery() -> Check {
    let (n, dims) = (400, 30);
    let signal = [6.0, 5.5, 5.0, 4.5, 4.0];
    let mut picks = Vec::new();
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(piiscan::rng::derive_seed(7, trial));
        let normal = |rng: &mut ChaCha8Rng| {
            // Box-Muller
            let (a, b): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos()
        };
        let mut data = Vec::with_capacity(n * dims);
        for _ in 0..n {
            for d in 0..dims {
                let s = if d < signal.len() {
                    signal[d] * normal(&mut rng)
                } else {
                    0.0
                };
                data.push(s + normal(&mut rng));
            }
        }
        let x = Matrix::new(n, dims, data).unwrap();
        let pca = fit_pca(&x).map_err(|e| e.to_string())?;
        picks.push(
            kneedle_elbow(&pca.explained_ratio)
                .map_err(|e| e.to_string())?
                .n_components,
        );
    }
    let hits = picks.iter().filter(|&&k| (4..=7).contains(&k)).count();
    let seen: BTreeSet<usize> = picks.iter().copied().collect();
    ensure(
        hits == 50,
        format!("{hits}/50 trials in [4, 7], picks {seen:?}"),
    )
}

// ---------------------------------------------------------------------------

fn separable_table(n: usize, seed: u64) -> TabularDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<bool> = a.iter().zip(&b).map(|(x, y)| x + 0.5 * y > 0.0).collect();
    let tag: Vec<String> = (0..n)
        .map(|_| ["red", "green", "blue"][rng.gen_range(0..3)].to_string())
        .collect();
    let tag2: Vec<String> = (0..n)
        .map(|_| ["red", "green", "blue"][rng.gen_range(0..3)].to_string())
        .collect();
    TabularDataset::new(
        vec!["a".into(), "b".into(), "tag".into(), "tag2".into()],
        vec![
            Column::Numerical(a),
            Column::Numerical(b),
            Column::Categorical(tag),
            Column::Categorical(tag2),
        ],
        labels,
        vec![BTreeSet::new(); n],
    )
    .unwrap()
}

fn ft_baseline() -> Check {
    let ds = separable_table(300, 7);
    let rows: Vec<usize> = (0..ds.n_samples()).collect();
    let base = FtConfig {
        epochs: 50,
        batch_size: 32,
        seed: 7,
        ..FtConfig::default()
    };
    let run = |variant| {
        train_ft(
            &ds,
            &rows,
            None,
            &FtConfig {
                variant,
                ..base.clone()
            },
        )
        .map_err(|e| e.to_string())
    };
    let none = run(FtVariant::None)?;
    let l1 = run(FtVariant::L1)?;
    let l2 = run(FtVariant::L2)?;
    let best_acc = none.history.iter().map(|e| e.train_acc).fold(0.0, f64::max);
    let first_95 = none
        .history
        .iter()
        .find(|e| e.train_acc >= 0.95)
        .map(|e| e.epoch);
    let (n1, r1) = (
        none.model.params().weight_l1(),
        l1.model.params().weight_l1(),
    );
    let (n2, r2) = (
        none.model.params().weight_l2(),
        l2.model.params().weight_l2(),
    );

    let tok = &none.model.tokenizer;
    let (c_tag, c_tag2) = (0, 1);
    let mut g = Graph::new(0);
    let batch = piiscan::ft::FtBatch {
        rows: 1,
        numerical: vec![0.0, 0.0],
        categorical: vec![tok.index_of(c_tag, "red"), tok.index_of(c_tag2, "red")],
    };
    let toks = none
        .model
        .tokenize_categorical(&mut g, none.model.params(), &batch)
        .map_err(|e| e.to_string())?;
    let independent = g.value(toks[0]).data() != g.value(toks[1]).data();
    ensure(
        first_95.is_some() && r1 < n1 && r2 < n2 && independent,
        format!(
            "train acc {best_acc:.3} (>= 0.95 first at epoch {first_95:?}); sum|w| {n1:.2} -> {r1:.2} with l1; sum w^2 {n2:.2} -> {r2:.2} with l2; per-feature tokens differ: {independent}"
        ),
    )
}

// ---------------------------------------------------------------------------

/// Confusion counts recomputed from scratch for a 0/1 prediction matrix.
fn metrics_oracle(pred: &Matrix, truth: &Matrix) -> (f64, f64, f64, f64, Vec<f64>) {
    let (mut tp, mut fp, mut tn, mut fnn) = (0.0, 0.0, 0.0, 0.0);
    let mut per = vec![0.0; truth.cols];
    for i in 0..truth.rows {
        for c in 0..truth.cols {
            let p = pred.data[i * truth.cols + c] == 1.0;
            let t = truth.data[i * truth.cols + c] == 1.0;
            match (p, t) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                (false, false) => tn += 1.0,
            }
            if p == t {
                per[c] += 1.0;
            }
        }
    }
    per.iter_mut().for_each(|v| *v /= truth.rows as f64);
    let acc = (tp + tn) / (tp + fp + tn + fnn);
    let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let rec = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
    let f1 = if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    };
    (acc, prec, rec, f1, per)
}

fn multi_label(run: &Run) -> Check {
    let base = run.dir.path();
    let mut cfg = PipelineConfig::default();
    let mut details = Vec::new();
    let mut ok = true;
    for mode in [EvalMode::LeakOnly, EvalMode::Combined] {
        let sub = base.join(format!("{mode:?}").to_lowercase());
        std::fs::create_dir_all(&sub).unwrap();
        std::fs::copy(base.join("reduced.csv"), sub.join("reduced.csv")).unwrap();
        let l = Layout {
            shared: base.to_path_buf(),
            run: sub.clone(),
        };
        cfg.classifier.mode = mode;
        run_stage(Stage::Train, &cfg, &l).map_err(|e| e.to_string())?;
        let report = piiscan::pipeline::load_report(&l).map_err(|e| e.to_string())?;

        let ds = read_dataset(&l.path(Artifact::Balanced)).unwrap();
        let x = Matrix::read_csv(BufReader::new(
            File::open(l.path(Artifact::Reduced)).unwrap(),
        ))
        .unwrap();
        let split =
            FoldSplit::read_csv(BufReader::new(File::open(l.path(Artifact::Folds)).unwrap()))
                .unwrap();
        let (y, names, rows) = targets(&ds, mode).unwrap();
        let split = split.restrict(&rows);
        let x = x.select_rows(&rows);
        let mlp_cfg = MlpConfig {
            seed: 7,
            ..MlpConfig::default()
        };
        let model = MlpModel::load(&l.path(Artifact::Model), x.cols, y.cols, &mlp_cfg).unwrap();
        let xt = x.select_rows(&split.test_indices);
        let yt = y.select_rows(&split.test_indices);
        let (acc, prec, rec, f1, per) = metrics_oracle(&model.predict(&xt).unwrap(), &yt);
        let t = &report.test;
        let dev = [
            acc - t.accuracy,
            prec - t.precision,
            rec - t.recall,
            f1 - t.f1,
        ]
        .into_iter()
        .chain(per.iter().zip(&t.per_label_accuracy).map(|(a, b)| a - b))
        .fold(0.0f64, |m, d| m.max(d.abs()));
        let score = match mode {
            EvalMode::Combined => {
                let c = names.iter().position(|n| n == "no_pii").unwrap();
                report.mean_val.per_label_accuracy[c]
            }
            _ => report.mean_val.macro_accuracy,
        };
        ok &= score >= 0.90 && dev <= 1e-12;
        details.push(format!("{mode:?} {score:.4} (oracle dev {dev:.1e})"));
    }
    ensure(ok, details.join("; "))
}

// ---------------------------------------------------------------------------

fn determinism(run: &Run) -> Check {
    let first = std::fs::read(layout(run).path(Artifact::Metrics)).map_err(|e| e.to_string())?;
    let again = tempfile::tempdir().unwrap();
    run_pipeline(&PipelineConfig::default(), &Layout::single(again.path()))
        .map_err(|e| e.to_string())?;
    let second = std::fs::read(again.path().join(Artifact::Metrics.file_name()))
        .map_err(|e| e.to_string())?;

    let records = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_records(&records, &mut buf).unwrap();
    let parsed = parse_flow_stream(buf.as_slice()).map_err(|e| e.to_string())?;
    let ds = tabularize(&records).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_dataset(&ds, &path).map_err(|e| e.to_string())?;
    let back = read_dataset(&path).map_err(|e| e.to_string())?;
    ensure(
        first == second && parsed == records && back == ds,
        format!(
            "metrics JSON identical: {}; corpus round-trip lossless: {}; dataset round-trip lossless: {}",
            first == second,
            parsed == records,
            back == ds
        ),
    )
}

fn run_check(name: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("PASS {name}: {d} [{secs:.1} s]");
            true
        }
        Err(d) => {
            println!("FAIL {name}: {d} [{secs:.1} s]");
            false
        }
    }
}

fn main() -> std::process::ExitCode {
    let run = pipeline_run();
    let results = [
        run_check("sweep_grid", sweep_grid),
        run_check("end_to_end_synthetic", || end_to_end(&run)),
        run_check("gradient_verification", gradient_verification),
        run_check("balancing_oracle", balancing_oracle),
        run_check("divergence_oracles", divergence_oracles),
        run_check("autoencoder_fixture", autoencoder_fixture),
        run_check("triplet_efficacy", || triplet_efficacy(&run)),
        run_check("kneedle_recovery", kneedle_recovery),
        run_check("ft_baseline", ft_baseline),
        run_check("multi_label", || multi_label(&run)),
        run_check("determinism_round_trips", || determinism(&run)),
    ];
    let failed = results.iter().filter(|r| !**r).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}

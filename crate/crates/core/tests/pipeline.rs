use std::path::Path;

use piiscan::classifier::EvalMode;
use piiscan::ft::FtVariant;
use piiscan::ifcs::{Metric, SelectionRule};
use piiscan::pipeline::{
    audit, dump_embeddings, run_pipeline, run_stage, Artifact, FtReport, Layout, Manifest,
    PipelineConfig, Stage, StoreKind, EXIT_CONFIG, EXIT_MISSING_INPUT,
};
use piiscan::Error;

fn small() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 3;
    cfg.synth.n_flows = 300;
    cfg.autoencoder.epochs = 15;
    cfg.finetune.epochs = 15;
    cfg.classifier.mlp.max_epochs = 15;
    cfg.prep.folds = 4;
    cfg
}

fn outputs(dir: &Path, stage: Stage) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let m = Manifest::load(&Manifest::path_for(dir, stage.name())).unwrap();
    m.outputs
        .iter()
        .map(|f| (f.path.clone(), std::fs::read(&f.path).unwrap()))
        .collect()
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = small();
    cfg.ifcs.metric = Metric::Wd;
    cfg.ifcs.selection = SelectionRule::Threshold { tau: 0.25 };
    cfg.classifier.mode = EvalMode::Combined;
    cfg.ft.variant = FtVariant::L2;
    cfg.reduce.n_components = Some(4);
    let text = cfg.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(
        PipelineConfig::from_toml("").unwrap(),
        PipelineConfig::default()
    );
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    for text in [
        "sede = 3",
        "[autoencoder]\nepoch = 3",
        "[prep]\nfolds = 1",
        "[sweep]\npca = []",
    ] {
        assert!(
            matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))),
            "{text}"
        );
    }
    let missing = PipelineConfig::load(Path::new("/nonexistent/cfg.toml"));
    assert!(matches!(missing, Err(Error::MissingInput { .. })));
}

#[test]
fn stage_without_inputs_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::single(dir.path());
    let err = run_stage(Stage::Ifcs, &small(), &layout).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_MISSING_INPUT);
    assert!(
        err.to_string().contains("missing compressed store"),
        "{err}"
    );
    let err = run_stage(Stage::Sweep, &small(), &layout).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
    assert_ne!(Stage::Ifcs.exit_code(), Stage::Compress.exit_code());
}

#[test]
fn full_run_is_audited_idempotent_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::single(dir.path());
    let cfg = small();
    let report = run_pipeline(&cfg, &layout).unwrap();
    assert_eq!(report.folds.len(), 4);

    let manifests = Manifest::load_dir(dir.path()).unwrap();
    assert_eq!(manifests.len(), 11);
    assert!(manifests
        .iter()
        .all(|m| m.seed == 3 && !m.outputs.is_empty()));
    let reached = audit(&manifests, "evaluate").unwrap();
    assert_eq!(reached.len(), 11);

    for stage in Stage::CHAIN {
        let before = outputs(dir.path(), stage);
        run_stage(stage, &cfg, &layout).unwrap();
        assert_eq!(
            before,
            outputs(dir.path(), stage),
            "{stage} is not idempotent"
        );
    }
    audit(&Manifest::load_dir(dir.path()).unwrap(), "evaluate").unwrap();

    let csv = dir.path().join("centroids.csv");
    dump_embeddings(&cfg, &layout, StoreKind::Finetuned, &csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let store =
        piiscan::embed::EmbeddingStore::load(&layout.path(Artifact::FinetunedStore)).unwrap();
    assert_eq!(text.lines().count(), store.n_features() + 1);

    std::fs::write(layout.path(Artifact::Reduced), "c0\n1\n").unwrap();
    let manifests: Vec<Manifest> = Manifest::load_dir(dir.path())
        .unwrap()
        .into_iter()
        .filter(|m| m.stage != "dump-embeddings")
        .collect();
    assert!(audit(&manifests, "evaluate").is_err());

    let other = tempfile::tempdir().unwrap();
    run_pipeline(&cfg.clone().with_seed(4), &Layout::single(other.path())).unwrap();
    let a = std::fs::read(dir.path().join("dataset.csv")).unwrap();
    let b = std::fs::read(other.path().join("dataset.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn ft_stage_reports_held_out_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::single(dir.path());
    let mut cfg = small();
    cfg.ft.epochs = 5;
    cfg.ft.dim = 8;
    cfg.ft.heads = 2;
    for stage in [Stage::Synth, Stage::Ingest, Stage::Prep, Stage::Ft] {
        run_stage(stage, &cfg, &layout).unwrap();
    }
    let report: FtReport =
        serde_json::from_slice(&std::fs::read(layout.path(Artifact::FtReport)).unwrap()).unwrap();
    assert!(report.best_epoch >= 1 && report.best_epoch <= report.epochs_run);
    assert!((0.0..=1.0).contains(&report.test_accuracy));
    let epochs = std::fs::read_to_string(layout.path(Artifact::FtEpochs)).unwrap();
    assert_eq!(epochs.lines().count(), report.epochs_run + 1);
}

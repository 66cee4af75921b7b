use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use piiscan::pipeline::{
    audit, dump_embeddings, run_pipeline, run_stage, run_sweep, Layout, Manifest, PipelineConfig,
    Stage, StageError, StoreKind, EXIT_CONFIG, EXIT_MISSING_INPUT,
};
use piiscan::Error;

#[derive(Parser)]
#[command(
    name = "piiscan",
    version,
    about = "PII leak detection over mobile network flows"
)]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's working directory.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic flow corpus.
    Synth,
    /// Parse flow records into a tabular dataset.
    Ingest,
    /// Balance classes and assign folds.
    Prep,
    /// Embed every feature value.
    Embed,
    /// Train the autoencoder and compress the embedding store.
    Compress,
    /// Score features by similarity-profile divergence and select some.
    Ifcs,
    /// Mine triplets.
    Mine,
    /// Train the projection head on the mined triplets.
    Finetune,
    /// Flatten centroids and optionally reduce with PCA.
    Reduce,
    /// Cross-validate the MLP classifier.
    Train,
    /// Score the trained model on the held-out split.
    Evaluate,
    /// Train the FT-Transformer baseline on the balanced table.
    Ft,
    /// Run every stage from the corpus to evaluation.
    Pipeline,
    /// Run the ablation grid.
    Sweep,
    /// Write per-feature centroid vectors as CSV.
    DumpEmbeddings {
        #[arg(long, value_enum, default_value_t = Kind::Finetuned)]
        store: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every manifest in the working directory against the file hashes.
    Audit {
        /// Stage whose manifest roots the provenance walk.
        #[arg(long, default_value = "evaluate")]
        root: String,
    },
    /// Print the effective config as TOML.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Raw,
    Compressed,
    Finetuned,
}

fn fail(code: i32, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code as u8)
}

fn stage_result(r: Result<(), StageError>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.exit_code(), e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => match PipelineConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                let code = match e {
                    Error::MissingInput { .. } => EXIT_MISSING_INPUT,
                    _ => EXIT_CONFIG,
                };
                return fail(code, e);
            }
        },
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = &cli.work_dir {
        cfg.work_dir = w.clone();
    }
    let layout = Layout::single(&cfg.work_dir);
    let single = |stage| stage_result(run_stage(stage, &cfg, &layout));
    match cli.command {
        Command::Synth => single(Stage::Synth),
        Command::Ingest => single(Stage::Ingest),
        Command::Prep => single(Stage::Prep),
        Command::Embed => single(Stage::Embed),
        Command::Compress => single(Stage::Compress),
        Command::Ifcs => single(Stage::Ifcs),
        Command::Mine => single(Stage::Mine),
        Command::Finetune => single(Stage::Finetune),
        Command::Reduce => single(Stage::Reduce),
        Command::Train => single(Stage::Train),
        Command::Evaluate => single(Stage::Evaluate),
        Command::Ft => single(Stage::Ft),
        Command::Pipeline => match run_pipeline(&cfg, &layout) {
            Ok(r) => {
                println!(
                    "mean validation accuracy {:.4}, test accuracy {:.4}",
                    r.mean_val.accuracy, r.test.accuracy
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(e.exit_code(), e),
        },
        Command::Sweep => match run_sweep(&cfg, &cfg.work_dir) {
            Ok(rows) => {
                for r in rows {
                    println!(
                        "{}\t{:.4}\t{:.4}",
                        r.name, r.mean_val_accuracy, r.test_accuracy
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e.exit_code(), e),
        },
        Command::DumpEmbeddings { store, out } => {
            let kind = match store {
                Kind::Raw => StoreKind::Raw,
                Kind::Compressed => StoreKind::Compressed,
                Kind::Finetuned => StoreKind::Finetuned,
            };
            stage_result(dump_embeddings(&cfg, &layout, kind, &out))
        }
        Command::Audit { root } => {
            let r = Manifest::load_dir(&cfg.work_dir).and_then(|m| audit(&m, &root));
            match r {
                Ok(stages) => {
                    println!("audit ok: {}", stages.join(", "));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(1, e),
            }
        }
        Command::Config => match cfg.to_toml() {
            Ok(t) => {
                print!("{t}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(EXIT_CONFIG, e),
        },
    }
}

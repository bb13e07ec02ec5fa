//! `autoft`: command-line pipeline for adaptive transfer learning on CTR
//! models. Subcommands cover synthetic data generation, vocabulary
//! building, the training stages (pretrain, fine-tune, AutoFT and its
//! ablations, target-only), evaluation and routing reports.
//!
//! Every command is deterministic given (seed, config, input files), no
//! command mutates its inputs, and failures exit with a category-specific
//! code: 2 config, 3 data, 4 vocabulary mismatch, 5 internal.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use autoft_core::Error;

#[derive(Parser)]
#[command(name = "autoft", version, about = "Adaptive transfer learning for deep CTR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Hyperparameter overrides shared by the training commands. Precedence:
/// built-in defaults < --config file < these flags.
#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    /// TOML file with run-config keys (same names as the flags).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// L2 regularization coefficient.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau_start: Option<f64>,
    #[arg(long)]
    tau_end: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    policy_hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    cross_layers: Option<usize>,
    /// Comma-separated deep layer widths, e.g. "64,32".
    #[arg(long)]
    deep_layers: Option<String>,
    /// Backbone: "dcn" or "dnn".
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    l2_include_embeddings: bool,
    #[arg(long)]
    l2_include_policies: bool,
}

/// Data/file arguments shared by the training commands.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Schema config file (TOML).
    #[arg(long)]
    schema: PathBuf,
    /// Vocabulary file built by `build-vocab`.
    #[arg(long)]
    vocab: PathBuf,
    /// Training CSV(s); repeat the flag to concatenate files.
    #[arg(long = "train", required = true)]
    train: Vec<PathBuf>,
    /// Validation CSV(s).
    #[arg(long = "val", required = true)]
    val: Vec<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    run_dir: PathBuf,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    overwrite: bool,
    /// Evaluate the best checkpoint on this CSV after training and write
    /// final_metrics.json (for AutoFT stages this also dumps routes.csv).
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Method name recorded in final_metrics.json (defaults to the stage
    /// name; pretrain runs usually pass "Source-only" or "All").
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic cross-domain benchmark.
    GenSynth {
        /// Output directory for the split CSVs, schema and manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Domain divergence in 0..=1.
        #[arg(long)]
        delta: Option<f64>,
        /// Target item-pool overlap fraction in 0..=1.
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        source_count: Option<usize>,
        #[arg(long)]
        target_count: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        genres: Option<usize>,
        /// Comma-separated context-field vocabulary sizes, e.g. "40,40".
        #[arg(long)]
        ctx_sizes: Option<String>,
        #[arg(long)]
        latent_dim: Option<usize>,
    },
    /// Build shared vocabularies from training CSVs (source and target).
    BuildVocab {
        #[arg(long)]
        schema: PathBuf,
        /// Output vocabulary file (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Features below this count map to the OOV index.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        /// Input CSVs (typically source and target training splits).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train a fresh bank (used for both Source-only and All pretraining).
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Fine-tune every parameter of a checkpoint on target data.
    Finetune {
        /// Pre-trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// AutoFT: freeze the checkpoint, train the target bank and policies.
    Autoft {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep only a subset of policy networks:
        /// embedding | cross | deep | cross-deep.
        #[arg(long)]
        ablation: Option<String>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Train from scratch on target data only.
    TargetOnly {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint on a CSV, or aggregate run directories into
    /// a results table.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Write metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write an inference-route dump here (AutoFT checkpoints only).
        #[arg(long)]
        route_dump: Option<PathBuf>,
        /// Completed run directories to aggregate into a results table.
        #[arg(long = "runs")]
        runs: Vec<PathBuf>,
        /// Output directory for results_table.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Summarize a route dump into per-unit routing fractions.
    ReportPolicy {
        /// Route dump CSV (routes.csv from an AutoFT run).
        #[arg(long)]
        routes: PathBuf,
        /// Output directory for routing_fractions.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn error_category(err: &Error) -> (&'static str, u8) {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Io { .. } => ("config", 2),
        Error::Data { .. } => ("data", 3),
        Error::VocabMismatch { .. } => ("vocab-mismatch", 4),
        Error::Shape { .. }
        | Error::MetricUndefined(_)
        | Error::NonFinite(_)
        | Error::Internal(_) => ("internal", 5),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth {
            out,
            seed,
            delta,
            overlap,
            source_count,
            target_count,
            items,
            genres,
            ctx_sizes,
            latent_dim,
        } => commands::gen_synth(commands::GenSynthArgs {
            out,
            seed,
            delta,
            overlap,
            source_count,
            target_count,
            items,
            genres,
            ctx_sizes,
            latent_dim,
        }),
        Command::BuildVocab {
            schema,
            out,
            min_count,
            inputs,
        } => commands::build_vocab(&schema, &out, min_count, &inputs),
        Command::Pretrain { data, flags } => commands::train_fresh(data, flags, false),
        Command::TargetOnly { data, flags } => commands::train_fresh(data, flags, true),
        Command::Finetune {
            checkpoint,
            data,
            flags,
        } => commands::finetune(&checkpoint, data, flags),
        Command::Autoft {
            checkpoint,
            ablation,
            data,
            flags,
        } => commands::autoft(&checkpoint, ablation.as_deref(), data, flags),
        Command::Evaluate {
            checkpoint,
            data,
            schema,
            vocab,
            out,
            route_dump,
            runs,
            out_dir,
        } => commands::evaluate(commands::EvaluateArgs {
            checkpoint,
            data,
            schema,
            vocab,
            out,
            route_dump,
            runs,
            out_dir,
        }),
        Command::ReportPolicy { routes, out_dir } => commands::report_policy(&routes, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = error_category(&err);
            eprintln!("error[{category}]: {err}");
            ExitCode::from(code)
        }
    }
}

//! Command implementations: thin orchestration over the library.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use autoft_core::checkpoint::{self, Checkpoint};
use autoft_core::dcn::{ArchConfig, Backbone};
use autoft_core::features::{load_dataset, read_csv_rows, Domain, DomainDataset, Schema, Split, Vocabulary};
use autoft_core::metrics::{self, RunMetrics};
use autoft_core::rundir::{collect_run_metrics, RunDir};
use autoft_core::synth::{self, SynthSpec};
use autoft_core::training::{self, RunConfig, Stage};
use autoft_core::{Error, Result};

use crate::{DataArgs, TrainFlags};

pub struct GenSynthArgs {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub delta: Option<f64>,
    pub overlap: Option<f64>,
    pub source_count: Option<usize>,
    pub target_count: Option<usize>,
    pub items: Option<usize>,
    pub genres: Option<usize>,
    pub ctx_sizes: Option<String>,
    pub latent_dim: Option<usize>,
}

pub fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.delta {
        spec.divergence = v;
    }
    if let Some(v) = args.overlap {
        spec.item_overlap = v;
    }
    if let Some(v) = args.source_count {
        spec.source_count = v;
    }
    if let Some(v) = args.target_count {
        spec.target_count = v;
    }
    if let Some(v) = args.items {
        spec.num_items = v;
    }
    if let Some(v) = args.genres {
        spec.num_genres = v;
    }
    if let Some(v) = &args.ctx_sizes {
        spec.ctx_vocab_sizes = v
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad context vocab size '{p}'")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(v) = args.latent_dim {
        spec.latent_dim = v;
    }
    let data = synth::generate(&spec)?;
    data.write_to_dir(&args.out)?;
    println!(
        "wrote synthetic benchmark to {} (source {} / target {} instances, delta {}, overlap {}, positive rates {:.3}/{:.3})",
        args.out.display(),
        spec.source_count,
        spec.target_count,
        spec.divergence,
        spec.item_overlap,
        data.manifest.source_positive_rate,
        data.manifest.target_positive_rate,
    );
    Ok(())
}

pub fn build_vocab(schema_path: &Path, out: &Path, min_count: usize, inputs: &[PathBuf]) -> Result<()> {
    let schema = Schema::load(schema_path)?;
    let mut rows = Vec::new();
    for input in inputs {
        rows.extend(read_csv_rows(input, &schema)?);
    }
    let vocab = autoft_core::features::build_vocab(&rows, &schema, min_count)?;
    vocab.save(&schema, out)?;
    let sizes = vocab.sizes();
    println!(
        "built vocabulary over {} rows: field sizes {:?} (hash {})",
        rows.len(),
        sizes,
        &vocab.hash(&schema)[..12]
    );
    Ok(())
}

/// Keys accepted in a --config TOML file; flags win over file values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOverrides {
    seed: Option<u64>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lambda: Option<f64>,
    tau_start: Option<f64>,
    tau_end: Option<f64>,
    patience: Option<usize>,
    policy_hidden: Option<usize>,
    l2_include_embeddings: Option<bool>,
    l2_include_policies: Option<bool>,
    arch: Option<ArchConfig>,
}

fn resolve_config(stage: Stage, flags: &TrainFlags) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(stage);
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let file: FileOverrides =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config file parse: {e}")))?;
        if let Some(v) = file.seed {
            cfg.seed = v;
        }
        if let Some(v) = file.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = file.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = file.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = file.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = file.tau_start {
            cfg.tau_start = v;
        }
        if let Some(v) = file.tau_end {
            cfg.tau_end = v;
        }
        if let Some(v) = file.patience {
            cfg.patience = v;
        }
        if let Some(v) = file.policy_hidden {
            cfg.policy_hidden = v;
        }
        if let Some(v) = file.l2_include_embeddings {
            cfg.l2_include_embeddings = v;
        }
        if let Some(v) = file.l2_include_policies {
            cfg.l2_include_policies = v;
        }
        if let Some(v) = file.arch {
            cfg.arch = v;
        }
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = flags.tau_start {
        cfg.tau_start = v;
    }
    if let Some(v) = flags.tau_end {
        cfg.tau_end = v;
    }
    if let Some(v) = flags.patience {
        cfg.patience = v;
    }
    if let Some(v) = flags.policy_hidden {
        cfg.policy_hidden = v;
    }
    if let Some(v) = flags.embed_dim {
        cfg.arch.embed_dim = v;
    }
    if let Some(v) = flags.cross_layers {
        cfg.arch.cross_layers = v;
    }
    if let Some(v) = &flags.deep_layers {
        cfg.arch.deep_layers = v
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad deep layer width '{p}'")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(v) = &flags.backbone {
        cfg.arch.backbone = match v.as_str() {
            "dcn" => Backbone::Dcn,
            "dnn" => Backbone::Dnn,
            other => return Err(Error::Config(format!("unknown backbone '{other}'"))),
        };
    }
    if flags.l2_include_embeddings {
        cfg.l2_include_embeddings = true;
    }
    if flags.l2_include_policies {
        cfg.l2_include_policies = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct LoadedData {
    vocab: Vocabulary,
    vocab_hash: String,
    train: DomainDataset,
    val: DomainDataset,
    eval: Option<DomainDataset>,
}

fn load_data(args: &DataArgs, domain: Domain) -> Result<LoadedData> {
    let schema = Schema::load(&args.schema)?;
    let vocab = Vocabulary::load(&schema, &args.vocab)?;
    let vocab_hash = vocab.hash(&schema);
    let mut train = DomainDataset {
        instances: Vec::new(),
        domain,
        split: Split::Train,
    };
    for path in &args.train {
        train
            .instances
            .extend(load_dataset(path, &schema, &vocab, domain, Split::Train)?.instances);
    }
    let mut val = DomainDataset {
        instances: Vec::new(),
        domain,
        split: Split::Validation,
    };
    for path in &args.val {
        val.instances
            .extend(load_dataset(path, &schema, &vocab, domain, Split::Validation)?.instances);
    }
    let eval = args
        .eval
        .as_ref()
        .map(|p| load_dataset(p, &schema, &vocab, Domain::Target, Split::Test))
        .transpose()?;
    Ok(LoadedData {
        vocab,
        vocab_hash,
        train,
        val,
        eval,
    })
}

fn check_vocab_hash(expected: &str, actual: &str) -> Result<()> {
    if expected != actual {
        return Err(Error::VocabMismatch {
            expected: expected[..12.min(expected.len())].to_string(),
            actual: actual[..12.min(actual.len())].to_string(),
        });
    }
    Ok(())
}

fn finish_dcn_run(
    run: &RunDir,
    cfg: &RunConfig,
    outcome: &training::TrainedDcn,
    data: &LoadedData,
    method: &str,
) -> Result<()> {
    run.write_metrics(&outcome.history)?;
    let bytes = checkpoint::dcn_to_bytes(&outcome.params, &data.vocab.sizes(), &data.vocab_hash);
    checkpoint::save_bytes(&run.checkpoint_path(), &bytes)?;
    if let Some(eval) = &data.eval {
        let (auc, logloss) = training::evaluate_dcn(&outcome.params, eval)?;
        run.write_final_metrics(&RunMetrics {
            method: method.to_string(),
            seed: cfg.seed,
            auc,
            logloss,
            instances: eval.len(),
        })?;
        println!("{method} seed {}: test AUC {auc:.4}, LogLoss {logloss:.4}", cfg.seed);
    }
    println!(
        "run complete: best epoch {} -> {}",
        outcome.best_epoch,
        run.checkpoint_path().display()
    );
    Ok(())
}

/// `pretrain` (fresh bank on whatever data is given) and `target-only`
/// (the same loop on target data) share this path.
pub fn train_fresh(args: DataArgs, flags: TrainFlags, target_only: bool) -> Result<()> {
    let stage = if target_only { Stage::TargetOnly } else { Stage::Pretrain };
    let cfg = resolve_config(stage, &flags)?;
    let domain = if target_only { Domain::Target } else { Domain::Source };
    let data = load_data(&args, domain)?;
    let run = RunDir::create(&args.run_dir, args.overwrite)?;
    run.write_config(&cfg)?;
    let outcome = training::run_pretrain(&data.train, &data.val, &data.vocab.sizes(), &cfg)?;
    let method = args.method.clone().unwrap_or_else(|| stage.method_name().to_string());
    finish_dcn_run(&run, &cfg, &outcome, &data, &method)
}

pub fn finetune(checkpoint_path: &Path, args: DataArgs, flags: TrainFlags) -> Result<()> {
    let mut cfg = resolve_config(Stage::FineTune, &flags)?;
    let loaded = match checkpoint::load(checkpoint_path)? {
        Checkpoint::Dcn(c) => c,
        Checkpoint::Autoft(_) => {
            return Err(Error::Config(
                "fine-tune expects a single-bank checkpoint, got an AutoFT composite".into(),
            ))
        }
    };
    let data = load_data(&args, Domain::Target)?;
    check_vocab_hash(&loaded.vocab_hash, &data.vocab_hash)?;
    // architecture comes from the checkpoint, not the flags
    cfg.arch = loaded.params.arch.clone();
    let run = RunDir::create(&args.run_dir, args.overwrite)?;
    run.write_config(&cfg)?;
    let outcome = training::run_finetune(loaded.params, &data.train, &data.val, &cfg)?;
    let method = args.method.clone().unwrap_or_else(|| "Fine-Tune".to_string());
    finish_dcn_run(&run, &cfg, &outcome, &data, &method)
}

fn parse_ablation(name: &str) -> Result<Stage> {
    match name {
        "embedding" => Ok(Stage::AblationEmbedding),
        "cross" => Ok(Stage::AblationCross),
        "deep" => Ok(Stage::AblationDeep),
        "cross-deep" => Ok(Stage::AblationCrossDeep),
        other => Err(Error::Config(format!(
            "unknown ablation '{other}' (expected embedding | cross | deep | cross-deep)"
        ))),
    }
}

pub fn autoft(checkpoint_path: &Path, ablation: Option<&str>, args: DataArgs, flags: TrainFlags) -> Result<()> {
    let stage = match ablation {
        None => Stage::AutoFT,
        Some(name) => parse_ablation(name)?,
    };
    let mut cfg = resolve_config(stage, &flags)?;
    let loaded = match checkpoint::load(checkpoint_path)? {
        Checkpoint::Dcn(c) => c,
        Checkpoint::Autoft(_) => {
            return Err(Error::Config(
                "autoft expects a single-bank pre-trained checkpoint".into(),
            ))
        }
    };
    let data = load_data(&args, Domain::Target)?;
    check_vocab_hash(&loaded.vocab_hash, &data.vocab_hash)?;
    cfg.arch = loaded.params.arch.clone();
    let run = RunDir::create(&args.run_dir, args.overwrite)?;
    run.write_config(&cfg)?;
    let outcome = training::run_autoft(loaded.params, &data.train, &data.val, &cfg)?;
    run.write_metrics(&outcome.history)?;
    let bytes = checkpoint::autoft_to_bytes(
        &outcome.model,
        &data.vocab.sizes(),
        &data.vocab_hash,
        cfg.policy_hidden,
    );
    checkpoint::save_bytes(&run.checkpoint_path(), &bytes)?;
    let method = args
        .method
        .clone()
        .unwrap_or_else(|| stage.method_name().to_string());
    if let Some(eval) = &data.eval {
        let (labels, scores, routes) = training::score_autoft(&outcome.model, eval)?;
        run.write_route_dump(&routes)?;
        let auc = metrics::auc(&labels, &scores)?;
        let logloss = metrics::logloss(&labels, &scores)?;
        run.write_final_metrics(&RunMetrics {
            method: method.clone(),
            seed: cfg.seed,
            auc,
            logloss,
            instances: eval.len(),
        })?;
        println!("{method} seed {}: test AUC {auc:.4}, LogLoss {logloss:.4}", cfg.seed);
    }
    println!(
        "run complete: best epoch {} -> {}",
        outcome.best_epoch,
        run.checkpoint_path().display()
    );
    Ok(())
}

pub struct EvaluateArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub route_dump: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    match (&args.checkpoint, args.runs.is_empty()) {
        (Some(_), true) => evaluate_checkpoint(&args),
        (None, false) => evaluate_runs(&args.runs, args.out_dir.as_deref()),
        _ => Err(Error::Config(
            "evaluate needs either --checkpoint with --data/--schema/--vocab, or --runs".into(),
        )),
    }
}

fn evaluate_checkpoint(args: &EvaluateArgs) -> Result<()> {
    let (Some(ckpt_path), Some(data_path), Some(schema_path), Some(vocab_path)) =
        (&args.checkpoint, &args.data, &args.schema, &args.vocab)
    else {
        return Err(Error::Config(
            "evaluate --checkpoint requires --data, --schema and --vocab".into(),
        ));
    };
    let schema = Schema::load(schema_path)?;
    let vocab = Vocabulary::load(&schema, vocab_path)?;
    let vocab_hash = vocab.hash(&schema);
    let dataset = load_dataset(data_path, &schema, &vocab, Domain::Target, Split::Test)?;
    let ckpt = checkpoint::load(ckpt_path)?;
    check_vocab_hash(ckpt.vocab_hash(), &vocab_hash)?;

    let (auc, logloss, routes) = match &ckpt {
        Checkpoint::Dcn(c) => {
            let (a, l) = training::evaluate_dcn(&c.params, &dataset)?;
            (a, l, None)
        }
        Checkpoint::Autoft(c) => {
            let (labels, scores, routes) = training::score_autoft(&c.model, &dataset)?;
            (
                metrics::auc(&labels, &scores)?,
                metrics::logloss(&labels, &scores)?,
                Some(routes),
            )
        }
    };
    println!(
        "{}: AUC {auc:.6}, LogLoss {logloss:.6} over {} instances",
        data_path.display(),
        dataset.len()
    );
    if let Some(out) = &args.out {
        let json = serde_json::json!({
            "data": data_path.display().to_string(),
            "instances": dataset.len(),
            "auc": auc,
            "logloss": logloss,
        });
        std::fs::write(out, serde_json::to_string_pretty(&json).unwrap())
            .map_err(|e| Error::Io { path: out.display().to_string(), source: e })?;
    }
    if let Some(dump_path) = &args.route_dump {
        let Some(routes) = routes else {
            return Err(Error::Config("--route-dump needs an AutoFT checkpoint".into()));
        };
        let mut text = String::from("id,p_e,p_c,p_d\n");
        for (id, r) in routes.iter().enumerate() {
            let bits = |v: &[u8]| v.iter().map(|b| char::from(b'0' + b)).collect::<String>();
            text.push_str(&format!(
                "{id},{},{},{}\n",
                bits(&r.embed),
                bits(&r.cross),
                bits(&r.deep)
            ));
        }
        std::fs::write(dump_path, text)
            .map_err(|e| Error::Io { path: dump_path.display().to_string(), source: e })?;
    }
    Ok(())
}

fn evaluate_runs(runs: &[PathBuf], out_dir: Option<&Path>) -> Result<()> {
    let collected = collect_run_metrics(runs)?;
    let table = metrics::results_table(&collected);
    print!("{}", metrics::results_table_text(&table));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
        let path = dir.join("results_table.csv");
        std::fs::write(&path, metrics::results_table_csv(&table))
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn report_policy(routes: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(routes)
        .map_err(|e| Error::Io { path: routes.display().to_string(), source: e })?;
    let report = metrics::routing_fractions(&text)?;
    print!("{}", report.to_text());
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io { path: out_dir.display().to_string(), source: e })?;
    let path = out_dir.join("routing_fractions.csv");
    std::fs::write(&path, report.to_csv())
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    println!("wrote {}", path.display());
    Ok(())
}

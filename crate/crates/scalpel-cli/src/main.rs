//! scalpel: train a toy model, compress it with second-order pruning, and
//! inspect the results.
//!
//! Subcommands: train, prune, eval, report, verify.
//! Exit codes: 0 success, 2 configuration error, 3 infeasible target,
//! 4 numeric failure.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use scalpel_core::error::CoreError;
use scalpel_core::harness::{
    build_model, evaluate_loss, load_model, save_model, sgd_train, Corpus, DataConfig, ModelConfig,
    Split,
};
use scalpel_core::report::{layer_csv, sparsity_by_layer, sparsity_by_type, type_csv};
use scalpel_core::surgeon::{run_resumable, save_resume, PruneState, ShotData, ShotReport};
use scalpel_core::verify;

use config::{parse_mode, parse_policy, parse_update, PruneConfig, ResolvedConfig};

#[derive(Parser)]
#[command(
    name = "scalpel",
    version,
    about = "Second-order pruning toolkit for desk-scale networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy byte-level model and write a checkpoint.
    Train(TrainArgs),
    /// Compress a checkpoint with multi-shot second-order pruning.
    Prune(Box<PruneArgs>),
    /// Evaluate a checkpoint on the corpus test split.
    Eval(EvalArgs),
    /// Summarize shot reports into sparsity tables.
    Report(ReportArgs),
    /// Run the randomized oracle-equivalence suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    max_batches: usize,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

impl DataArgs {
    fn to_config(&self, seed: u64) -> DataConfig {
        DataConfig {
            seq_len: self.seq_len,
            batch_size: self.batch_size,
            max_batches: self.max_batches,
            test_fraction: self.test_fraction,
            seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Plain byte/UTF-8 text file.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint stem (writes <out>.json and <out>.bin).
    #[arg(long)]
    out: PathBuf,
    /// Architecture: mlp or transformer.
    #[arg(long, default_value = "mlp")]
    arch: String,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Hidden dims for the MLP, comma separated.
    #[arg(long, default_value = "32,32")]
    hidden: String,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 64)]
    ff_dim: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct PruneArgs {
    /// Input checkpoint stem.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    update: Option<String>,
    #[arg(long)]
    max_correlated: Option<usize>,
    #[arg(long)]
    damp_g: Option<f64>,
    #[arg(long)]
    damp_a: Option<f64>,
    #[arg(long)]
    lora: bool,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_steps: Option<usize>,
    #[arg(long)]
    lora_lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Also write cost tables for the final weights to costs.csv.
    #[arg(long)]
    dump_costs: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Optional metrics output file (JSON); stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Shot report stream (JSON lines) written by `prune`.
    #[arg(long)]
    shots: PathBuf,
    /// Output directory for the CSV tables and summary.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 100)]
    quad_removals: usize,
    #[arg(long, default_value_t = 20)]
    nkp_instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::Config(_)
        | CoreError::Shape(_)
        | CoreError::Ingest(_)
        | CoreError::Checkpoint(_)
        | CoreError::Io(_) => 2,
        CoreError::Infeasible { .. } => 3,
        CoreError::Numeric(_) | CoreError::DegenerateCurvature(_) | CoreError::OracleScale(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Prune(args) => cmd_prune(*args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn parse_hidden(spec: &str) -> Result<Vec<usize>, CoreError> {
    spec.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CoreError::config(format!("bad hidden dims `{spec}`: {e}")))
}

fn check_vocab(corpus: &Corpus, vocab: usize) -> Result<(), CoreError> {
    if corpus.max_token() as usize >= vocab {
        return Err(CoreError::config(format!(
            "corpus contains token {} but the vocabulary has size {vocab}",
            corpus.max_token()
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<i32, CoreError> {
    let corpus = Corpus::load(&args.corpus)?;
    check_vocab(&corpus, args.vocab)?;
    let model_config = match args.arch.as_str() {
        "mlp" => ModelConfig::Mlp {
            vocab_size: args.vocab,
            hidden: parse_hidden(&args.hidden)?,
        },
        "transformer" => ModelConfig::Transformer {
            vocab_size: args.vocab,
            d_model: args.d_model,
            ff_dim: args.ff_dim,
        },
        other => return Err(CoreError::config(format!("unknown arch `{other}`"))),
    };
    let data_config = args.data.to_config(args.seed);
    let train = corpus.batches(Split::Train, &data_config)?;

    let mut model = build_model(&model_config, args.seed)?;
    let log = sgd_train(&mut model, &train, args.epochs, args.lr)?;
    save_model(&model, &args.out)?;

    let test_loss = corpus
        .batches(Split::Test, &data_config)
        .ok()
        .map(|test| evaluate_loss(&model, &test))
        .transpose()?;
    let resolved = serde_json::json!({
        "arch": args.arch,
        "vocab": args.vocab,
        "hidden": parse_hidden(&args.hidden)?,
        "d_model": args.d_model,
        "ff_dim": args.ff_dim,
        "epochs": args.epochs,
        "lr": args.lr,
        "seed": args.seed,
        "seq_len": data_config.seq_len,
        "batch_size": data_config.batch_size,
        "max_batches": data_config.max_batches,
        "test_fraction": data_config.test_fraction,
        "corpus": args.corpus,
    });
    let log_json = serde_json::json!({
        "resolved_config": resolved,
        "epoch_losses": log.epoch_losses,
        "final_train_loss": log.epoch_losses.last(),
        "test_loss": test_loss,
    });
    let log_path = args.out.with_extension("train_log.json");
    std::fs::write(&log_path, serde_json::to_vec_pretty(&log_json).unwrap())?;
    let loss_note = log
        .epoch_losses
        .last()
        .map(|l| format!(", final train loss {l:.4}"))
        .unwrap_or_default();
    println!(
        "trained {} epochs{loss_note}; wrote {} and {}",
        args.epochs,
        args.out.with_extension("json").display(),
        log_path.display()
    );
    Ok(0)
}

fn merged_config(args: &PruneArgs) -> Result<ResolvedConfig, CoreError> {
    let mut cfg: PruneConfig = match &args.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| CoreError::config(format!("config parse: {e}")))?,
        None => PruneConfig::default(),
    };
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode).map_err(CoreError::Config)?;
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if args.shots.is_some() {
        cfg.shots = args.shots;
    }
    if let Some(policy) = &args.policy {
        cfg.policy = parse_policy(policy).map_err(CoreError::Config)?;
    }
    if let Some(update) = &args.update {
        cfg.update = parse_update(update).map_err(CoreError::Config)?;
    }
    if let Some(m) = args.max_correlated {
        cfg.max_correlated = m;
    }
    if args.damp_g.is_some() {
        cfg.damp_frac_g = args.damp_g;
    }
    if let Some(d) = args.damp_a {
        cfg.damp_frac_a = d;
    }
    if args.lora {
        cfg.lora.enabled = true;
    }
    if let Some(r) = args.lora_rank {
        cfg.lora.rank = r;
    }
    if let Some(s) = args.lora_steps {
        cfg.lora.steps = s;
    }
    if let Some(lr) = args.lora_lr {
        cfg.lora.learning_rate = lr;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = args.seq_len {
        cfg.data.seq_len = s;
    }
    if let Some(b) = args.batch_size {
        cfg.data.batch_size = b;
    }
    if let Some(m) = args.max_batches {
        cfg.data.max_batches = m;
    }
    if let Some(f) = args.test_fraction {
        cfg.data.test_fraction = f;
    }
    Ok(cfg.resolve())
}

fn selection_dump(state: &PruneState) -> serde_json::Value {
    let layers: Vec<serde_json::Value> = state
        .masks
        .iter()
        .map(|m| {
            let rows: Vec<usize> = m
                .rows
                .iter()
                .enumerate()
                .filter(|(_, &r)| r)
                .map(|(i, _)| i)
                .collect();
            let cols: Vec<usize> = m
                .cols
                .iter()
                .enumerate()
                .filter(|(_, &c)| c)
                .map(|(i, _)| i)
                .collect();
            let elements: Vec<usize> = m
                .elements
                .iter()
                .enumerate()
                .filter(|(_, &e)| e)
                .map(|(i, _)| i)
                .collect();
            serde_json::json!({
                "layer": m.layer_name,
                "rows": rows,
                "cols": cols,
                "elements": elements,
            })
        })
        .collect();
    serde_json::Value::Array(layers)
}

fn cmd_prune(args: PruneArgs) -> Result<i32, CoreError> {
    let resolved = merged_config(&args)?;
    let settings = resolved.settings();
    settings.validate()?;
    let model = load_model(&args.checkpoint)?;
    let corpus = Corpus::load(&args.corpus)?;
    check_vocab(&corpus, model.meta.vocab_size.max(1))?;
    let data_config = resolved.data_config();
    let train = corpus.batches(Split::Train, &data_config)?;
    let test = corpus.batches(Split::Test, &data_config).ok();

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("resolved_config.json"),
        serde_json::to_vec_pretty(&resolved).unwrap(),
    )?;

    let shots_path = args.out.join("shots.jsonl");
    let mut shots_file = std::fs::File::create(&shots_path)?;
    let resume_stem = args.out.join("resume");
    let data = ShotData {
        train: &train,
        test: test.as_deref(),
    };

    let state = PruneState::new(&model);
    let mut final_state = PruneState::new(&model);
    let (pruned, reports) = run_resumable(&model, &data, &settings, state, 0, |m, s, report| {
        let line = serde_json::to_string(report).unwrap();
        writeln!(shots_file, "{line}")?;
        save_resume(&resume_stem, m, s, report.shot)?;
        final_state = s.clone();
        eprintln!(
            "shot {:>3}: alpha {:.4} -> size {:.4}, train loss {:.4} -> {:.4} ({:.2}s)",
            report.shot,
            report.alpha_t,
            report.realized_size,
            report.train_loss_before,
            report.train_loss_after,
            report.wall_time_secs
        );
        Ok(())
    })?;

    save_model(&pruned, args.out.join("pruned"))?;
    std::fs::write(
        args.out.join("selection.json"),
        serde_json::to_vec_pretty(&selection_dump(&final_state)).unwrap(),
    )?;
    if args.dump_costs {
        let tables = scalpel_core::surgeon::cost_tables(&pruned, &train, &settings)?;
        std::fs::write(
            args.out.join("costs.csv"),
            scalpel_core::costs::cost_csv(&tables),
        )?;
    }

    let final_size = reports.last().map(|r| r.realized_size).unwrap_or(1.0);
    println!(
        "pruned to realized size {:.4} over {} shots; outputs in {}",
        final_size,
        reports.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, CoreError> {
    let model = load_model(&args.checkpoint)?;
    let corpus = Corpus::load(&args.corpus)?;
    if corpus.max_token() as usize >= model.meta.vocab_size {
        return Err(CoreError::config(format!(
            "vocabulary mismatch: corpus token {} exceeds model vocab {}",
            corpus.max_token(),
            model.meta.vocab_size
        )));
    }
    let data_config = args.data.to_config(args.seed);
    let test = corpus.batches(Split::Test, &data_config)?;
    let loss = evaluate_loss(&model, &test)?;
    let total = model.prunable_weight_count();
    let live = model.live_weight_count();
    let metrics = serde_json::json!({
        "test_loss": loss,
        "perplexity": loss.exp(),
        "live_parameters": live,
        "total_parameters": total,
        "live_fraction": live as f64 / total as f64,
    });
    let text = serde_json::to_string_pretty(&metrics).unwrap();
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(0)
}

fn load_reports(path: &Path) -> Result<Vec<ShotReport>, CoreError> {
    let content = std::fs::read_to_string(path)?;
    let mut reports = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let report: ShotReport = serde_json::from_str(line)
            .map_err(|e| CoreError::config(format!("bad shot report on line {}: {e}", i + 1)))?;
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(CoreError::config("no shot reports found"));
    }
    Ok(reports)
}

fn cmd_report(args: ReportArgs) -> Result<i32, CoreError> {
    let reports = load_reports(&args.shots)?;
    let last = reports.last().unwrap();
    std::fs::create_dir_all(&args.out)?;
    let by_layer = sparsity_by_layer(last);
    let by_type = sparsity_by_type(last);
    std::fs::write(args.out.join("sparsity_by_layer.csv"), layer_csv(&by_layer))?;
    std::fs::write(args.out.join("sparsity_by_type.csv"), type_csv(&by_type))?;
    let summary = serde_json::json!({
        "shots": reports.len(),
        "final_alpha": last.alpha_t,
        "final_realized_size": last.realized_size,
        "final_train_loss": last.train_loss_after,
        "final_test_loss": last.test_loss,
        "by_type": by_type,
        "loss_trajectory": reports
            .iter()
            .map(|r| serde_json::json!({
                "shot": r.shot,
                "alpha": r.alpha_t,
                "train_loss": r.train_loss_after,
                "test_loss": r.test_loss,
            }))
            .collect::<Vec<_>>(),
    });
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_vec_pretty(&summary).unwrap(),
    )?;
    println!(
        "wrote sparsity tables and summary to {}",
        args.out.display()
    );
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<i32, CoreError> {
    let mut all = Vec::new();
    all.extend(verify::oracle_equivalence_suite(args.instances, args.seed)?);
    all.push(verify::quadratic_exactness_suite(
        args.quad_removals,
        args.seed,
    )?);
    all.extend(verify::nkp_agreement_suite(args.nkp_instances, args.seed)?);
    let mut failed = false;
    for check in &all {
        println!("{}", check.line());
        failed |= !check.passed;
    }
    if failed {
        Err(CoreError::numeric("oracle suite found disagreements"))
    } else {
        println!("all {} checks passed", all.len());
        Ok(0)
    }
}

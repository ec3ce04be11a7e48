//! Operator command line: data synthesis, training, evaluation, ablations,
//! gradient checking, and contrastive-gradient diagnostics.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 training
//! divergence, 1 any other failure.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mbrec::config::{ConfigError, LrSchedule, RunConfig};
use mbrec::data::{
    parse_events, synth_generate, write_events_csv, DataError, Dataset, DatasetMeta, SlotConfig,
    SynthConfig,
};
use mbrec::eval::ablation::{comparison_csv, run_ablation, AblationVariant};
use mbrec::eval::{evaluate_embeddings, make_split};
use mbrec::model::final_embeddings;
use mbrec::train::{epoch_log_csv, full_objective_gradcheck, train, Checkpoint, TrainError};

#[derive(Parser)]
#[command(name = "mbrec", version, about = "Multi-behavior sequential recommender workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-cluster synthetic event log with its JSON sidecar.
    Synth(SynthArgs),
    /// Train on an event log; writes checkpoint, per-epoch CSV, and the
    /// resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint under the leave-one-out protocol.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants side by side.
    Ablate(AblateArgs),
    /// Finite-difference check of the full objective on the minimal model.
    Gradcheck(GradcheckArgs),
    /// Emit the negative-pair gradient curve c(x) = √(1−x²)·exp(x/τ) as CSV.
    Gradlab(GradlabArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    behaviors: usize,
    #[arg(long, default_value_t = 3)]
    slots: usize,
    #[arg(long, default_value_t = 86_400)]
    granularity: u64,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Event CSV output path.
    #[arg(long, default_value = "events.csv")]
    out: PathBuf,
    /// JSON sidecar output path.
    #[arg(long, default_value = "meta.json")]
    meta: PathBuf,
}

/// Config-file plus flag overrides; flags win.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    granularity: Option<u64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    /// "fixed" or "cyclical:<base>:<max>:<period>".
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    l2_lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_negatives: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_temporal: bool,
    #[arg(long)]
    bpr_only: bool,
    #[arg(long)]
    untie_slot_weights: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            };
        }
        set!(embed_dim);
        set!(layers);
        set!(heads);
        set!(tau);
        set!(alpha);
        set!(beta);
        set!(epochs);
        set!(batch_size);
        set!(learning_rate);
        set!(l2_lambda);
        set!(seed);
        set!(eval_negatives);
        set!(eval_every);
        set!(threads);
        if let Some(v) = self.slots {
            cfg.num_slots = v;
        }
        if let Some(v) = self.granularity {
            cfg.granularity = v;
        }
        if let Some(s) = &self.schedule {
            cfg.lr_schedule = parse_schedule(s)?;
        }
        if self.no_temporal {
            cfg.temporal_injection = false;
        }
        if self.bpr_only {
            cfg.bpr_only = true;
        }
        if self.untie_slot_weights {
            cfg.tie_weights_across_slots = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_schedule(s: &str) -> Result<LrSchedule> {
    if s == "fixed" {
        return Ok(LrSchedule::Fixed);
    }
    if let Some(rest) = s.strip_prefix("cyclical:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() == 3 {
            return Ok(LrSchedule::CyclicalTriangular {
                base: parts[0].parse().context("cyclical base")?,
                max: parts[1].parse().context("cyclical max")?,
                period: parts[2].parse().context("cyclical period")?,
            });
        }
    }
    anyhow::bail!(ConfigError::Invalid(format!(
        "schedule `{s}` (expected fixed | cyclical:<base>:<max>:<period>)"
    )))
}

#[derive(Args)]
struct TrainArgs {
    /// Event CSV path.
    #[arg(long)]
    data: PathBuf,
    /// JSON sidecar path.
    #[arg(long)]
    meta: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for checkpoint.json, epochs.csv, config.json.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Metric report JSON output (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump per-user cross-behavior attention weights (last slot
    /// transition) to this CSV path.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Variant to run (repeatable): full | wo_cl | wo_mbg |
    /// drop_behavior:<b> | target_only. Default: full, wo_cl, wo_mbg,
    /// target_only.
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Comparison table CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct GradlabArgs {
    /// Comma-separated temperatures.
    #[arg(long, default_value = "0.02,0.1,0.5")]
    taus: String,
    /// Sample count across x ∈ [−0.99, 0.99].
    #[arg(long, default_value_t = 199)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Gradlab(args) => cmd_gradlab(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(TrainError::Diverged { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(DataError::InvalidCatalog(_) | DataError::InfeasibleSynth(_)) =
            cause.downcast_ref::<DataError>()
        {
            return 2;
        }
    }
    1
}

fn load_dataset_inputs(data: &Path, meta: &Path) -> Result<(Vec<mbrec::data::InteractionEvent>, DatasetMeta)> {
    let meta_text =
        fs::read_to_string(meta).with_context(|| format!("reading sidecar {}", meta.display()))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).context("parsing sidecar JSON")?;
    let file = fs::File::open(data).with_context(|| format!("opening events {}", data.display()))?;
    let events = parse_events(BufReader::new(file), &meta)?;
    Ok((events, meta))
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        num_users: args.users,
        num_items: args.items,
        num_behaviors: args.behaviors,
        num_slots: args.slots,
        granularity: args.granularity,
        clusters: args.clusters,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let (events, meta) = synth_generate(&cfg)?;

    let mut csv = Vec::new();
    write_events_csv(&mut csv, &events)?;
    fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;
    fs::write(&args.meta, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", args.meta.display()))?;

    println!(
        "wrote {} events for {} users × {} items × {} behaviors to {} (sidecar {})",
        events.len(),
        args.users,
        args.items,
        args.behaviors,
        args.out.display(),
        args.meta.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = args.config.resolve()?;
    let (events, meta) = load_dataset_inputs(&args.data, &args.meta)?;

    fs::create_dir_all(&args.out_dir)?;
    let resolved = cfg.to_json_pretty();
    println!("{resolved}");
    fs::write(args.out_dir.join("config.json"), &resolved)?;

    let catalog = meta.catalog()?;
    let (train_events, split) = make_split(
        &events,
        &catalog,
        meta.num_users,
        meta.num_items,
        cfg.eval_negatives,
        cfg.negatives_exclude_all_behaviors,
        cfg.seed,
    );
    let ds = Dataset::prepare(meta, train_events, SlotConfig::new(cfg.granularity, cfg.num_slots))?;

    let outcome = train(&ds, &cfg, Some(&split))?;

    fs::write(args.out_dir.join("epochs.csv"), epoch_log_csv(&outcome.epochs))?;
    Checkpoint::from_params(&outcome.params, &cfg).save(&args.out_dir.join("checkpoint.json"))?;

    let (user_emb, item_emb) = final_embeddings(&outcome.params, &ds);
    let report =
        evaluate_embeddings(&user_emb, &item_emb, &split, &cfg.eval_topk, &ds.user_event_counts, cfg.threads)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    fs::write(args.out_dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;

    println!(
        "trained {} epochs; artifacts in {}",
        outcome.epochs.len(),
        args.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let cfg = args.config.resolve()?;
    let (events, meta) = load_dataset_inputs(&args.data, &args.meta)?;
    println!("{}", cfg.to_json_pretty());

    let catalog = meta.catalog()?;
    let (train_events, split) = make_split(
        &events,
        &catalog,
        meta.num_users,
        meta.num_items,
        cfg.eval_negatives,
        cfg.negatives_exclude_all_behaviors,
        cfg.seed,
    );
    let ds = Dataset::prepare(meta, train_events, SlotConfig::new(cfg.granularity, cfg.num_slots))?;

    let params = Checkpoint::load(&args.checkpoint)?.into_params();
    let (user_emb, item_emb) = final_embeddings(&params, &ds);
    let report =
        evaluate_embeddings(&user_emb, &item_emb, &split, &cfg.eval_topk, &ds.user_event_counts, cfg.threads)?;

    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = &args.out {
        fs::write(path, &text)?;
    }
    if let Some(path) = &args.dump_attention {
        match mbrec::model::user_attention_snapshot(&params, &ds) {
            Some(maps) => {
                fs::write(path, mbrec::model::memory::attention_maps_csv(&maps, "user"))?;
                eprintln!("wrote attention weights to {}", path.display());
            }
            None => eprintln!("no slot transition exists; nothing to dump"),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let cfg = args.config.resolve()?;
    let (events, meta) = load_dataset_inputs(&args.data, &args.meta)?;
    println!("{}", cfg.to_json_pretty());

    let variants: Vec<AblationVariant> = if args.variants.is_empty() {
        vec![
            AblationVariant::Full,
            AblationVariant::WoCl,
            AblationVariant::WoMbg,
            AblationVariant::TargetOnly,
        ]
    } else {
        args.variants
            .iter()
            .map(|s| s.parse::<AblationVariant>().map_err(|m| anyhow::anyhow!(ConfigError::Invalid(m))))
            .collect::<Result<_>>()?
    };

    let mut outcomes = Vec::new();
    for v in variants {
        eprintln!("running variant {v} ...");
        outcomes.push(run_ablation(v, &events, &meta, &cfg)?);
    }

    let table = comparison_csv(&outcomes);
    println!("{table}");
    if let Some(path) = &args.out {
        fs::write(path, &table)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let report = full_objective_gradcheck(args.seed, args.eps, args.tol)?;
    for check in &report.checks {
        println!(
            "{} {:<28} max rel err {:.3e}",
            if check.passed(report.tol) { "PASS" } else { "FAIL" },
            check.name,
            check.max_rel_err
        );
    }
    if report.passed() {
        println!("gradcheck passed: {} parameters, max rel err {:.3e}", report.checks.len(), report.max_rel_err());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck FAILED on {} parameter(s)", report.failures().len());
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_gradlab(args: GradlabArgs) -> Result<ExitCode> {
    let taus: Vec<f64> = args
        .taus
        .split(',')
        .map(|s| s.trim().parse::<f64>().context("parsing tau list"))
        .collect::<Result<_>>()?;
    if taus.iter().any(|&t| t <= 0.0) {
        anyhow::bail!(ConfigError::Invalid("temperatures must be positive".into()));
    }
    let mut csv = String::from("x,tau,c\n");
    for &tau in &taus {
        for k in 0..args.points {
            let x = -0.99 + 1.98 * k as f64 / (args.points.max(2) - 1) as f64;
            csv.push_str(&format!("{x:.6},{tau},{:.8e}\n", mbrec::model::fusion::neg_grad_curve(x, tau)));
        }
    }
    match &args.out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

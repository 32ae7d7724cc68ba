//! Command-line surface: dataset generation, training, evaluation,
//! experiment grids, and report rendering.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad arguments,
//! configs, files, shapes), 3 on numerical failure (NaN guard).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use condseg::conditioning::ConditioningKind;
use condseg::error::{Error, Result};
use condseg::eval::{evaluate, EvalMode};
use condseg::experiment::{
    default_threads, generate_dataset, report, run_experiment, Preset, PresetSpec, Variant,
};
use condseg::metadata::Permutation;
use condseg::synth::{Dataset, Split};
use condseg::training::{
    train, Checkpoint, CheckpointPolicy, LossKind, MetadataMode, TrainConfig,
};
use condseg::unet::{ConditionedUNet, UNetConfig};

#[derive(Parser)]
#[command(
    name = "condseg",
    about = "Metadata-conditioned channel modulation for segmentation: synthetic benchmarks, training, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset preset to a directory.
    Gen(GenArgs),
    /// Train a model described by a TOML config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset under a metadata mode.
    Eval(EvalArgs),
    /// Run a preset's (variant, seed) grid and aggregate the results.
    Experiment(ExperimentArgs),
    /// Re-render aggregate tables from a completed experiment directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Preset: domains | styles | multitask | continuous.
    preset: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write PGM previews of images and masks.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; every field is echoed into the output directory.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (a generated preset).
    #[arg(long)]
    data: PathBuf,
    /// correct | dummy | swap.
    #[arg(long, default_value = "correct")]
    mode: String,
    /// Swap permutation as `from:to,from:to,...` (swap mode only).
    #[arg(long)]
    perm: Option<String>,
    /// Categorical field the permutation applies to (default: the
    /// schema's first categorical field).
    #[arg(long)]
    field: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Directory for the per-sample CSV and summary (optional).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Preset: domains | styles | multitask | continuous.
    preset: String,
    /// Comma-separated variant list (default: the preset's full grid).
    #[arg(long)]
    variants: Option<String>,
    /// Comma-separated seeds, e.g. `1,2,3`.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: CONDSEG_THREADS or the CPU count).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment output directory.
    dir: PathBuf,
}

/// Flat train config file; optional fields fall back to the defaults
/// echoed below.
#[derive(serde::Serialize, serde::Deserialize)]
struct TrainFileConfig {
    data_dir: PathBuf,
    out_dir: PathBuf,
    conditioning: ConditioningKind,
    #[serde(default = "default_depth")]
    depth: usize,
    #[serde(default = "default_base_channels")]
    base_channels: usize,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_loss")]
    loss: LossKind,
    #[serde(default = "default_metadata_mode")]
    metadata_mode: MetadataMode,
    #[serde(default = "default_checkpoint_policy")]
    checkpoint_policy: CheckpointPolicy,
    #[serde(default = "default_lr_min")]
    lr_min: f64,
    #[serde(default = "default_lr_max")]
    lr_max: f64,
    #[serde(default = "default_cycles")]
    cycles: usize,
    #[serde(default = "default_threshold")]
    threshold: f64,
}

fn default_depth() -> usize {
    3
}
fn default_base_channels() -> usize {
    16
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    8
}
fn default_loss() -> LossKind {
    LossKind::Bce
}
fn default_metadata_mode() -> MetadataMode {
    MetadataMode::Correct
}
fn default_checkpoint_policy() -> CheckpointPolicy {
    CheckpointPolicy::BestVal
}
fn default_lr_min() -> f64 {
    2e-4
}
fn default_lr_max() -> f64 {
    8e-4
}
fn default_cycles() -> usize {
    8
}
fn default_threshold() -> f64 {
    0.5
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    spec.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad seed {s:?}")))
        })
        .collect()
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let preset: Preset = args.preset.parse()?;
    let spec = PresetSpec::for_preset(preset);
    let dataset = generate_dataset(preset, &spec, args.seed)?;
    dataset.save(&args.out)?;
    if args.pgm {
        dataset.export_pgm(&args.out.join("pgm"))?;
    }
    println!(
        "wrote {} ({} samples, {} subsets) to {}",
        preset.as_str(),
        dataset.samples.len(),
        dataset.subsets().len(),
        args.out.display()
    );
    for ((split, subset), n) in dataset.counts() {
        println!("  {:<5} {:<10} {n}", split.as_str(), subset);
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let file: TrainFileConfig = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", args.config.display())))?;
    let dataset = Dataset::load(&file.data_dir)?;

    let model_cfg = UNetConfig {
        depth: file.depth,
        base_channels: file.base_channels,
        in_channels: 1,
        out_channels: dataset.mask_channels,
        conditioning: file.conditioning,
        meta_dim: if file.conditioning.uses_metadata() {
            dataset.schema.total_dim()
        } else {
            0
        },
    };
    let train_cfg = TrainConfig {
        epochs: file.epochs,
        batch_size: file.batch_size,
        seed: file.seed,
        loss: file.loss,
        metadata_mode: file.metadata_mode,
        checkpoint_policy: file.checkpoint_policy,
        lr_min: file.lr_min,
        lr_max: file.lr_max,
        cycles: file.cycles,
        threshold: file.threshold,
    };

    std::fs::create_dir_all(&file.out_dir).map_err(|e| Error::io(&file.out_dir, e))?;
    // Echo every resolved field before the long part starts.
    let echo = toml::to_string(&file)
        .map_err(|e| Error::InvalidConfig(format!("config echo failed: {e}")))?;
    let echo_path = file.out_dir.join("config_echo.toml");
    std::fs::write(&echo_path, &echo).map_err(|e| Error::io(&echo_path, e))?;

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(file.seed);
    let mut model = ConditionedUNet::build(model_cfg, &mut rng)?;
    let outcome = train(&mut model, &dataset, &train_cfg)?;

    let ckpt_path = file.out_dir.join("checkpoint.bin");
    outcome.checkpoint.save(&ckpt_path)?;
    let history_path = file.out_dir.join("history.csv");
    std::fs::write(
        &history_path,
        condseg::training::history_csv(&outcome.history),
    )
    .map_err(|e| Error::io(&history_path, e))?;
    let last = outcome.history.last().expect("non-empty history");
    println!(
        "trained {} for {} epochs: best epoch {} (val loss {:.6}), final val F1 {:.4}",
        file.conditioning,
        file.epochs,
        outcome.checkpoint.best_epoch,
        outcome.checkpoint.best_val_loss,
        last.val_f1
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn parse_mode(args: &EvalArgs, dataset: &Dataset) -> Result<EvalMode> {
    match args.mode.as_str() {
        "correct" => Ok(EvalMode::Correct),
        "dummy" => Ok(EvalMode::Dummy),
        "swap" => {
            let spec = args.perm.as_deref().ok_or_else(|| {
                Error::InvalidConfig("swap mode requires --perm from:to,...".into())
            })?;
            let field = match &args.field {
                Some(f) => f.clone(),
                None => dataset
                    .schema
                    .first_categorical()
                    .ok_or_else(|| {
                        Error::Metadata("schema has no categorical field to swap".into())
                    })?
                    .name()
                    .to_string(),
            };
            Ok(EvalMode::Swap(Permutation::parse(&field, spec)?))
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown mode {other:?} (expected correct|dummy|swap)"
        ))),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let model = Checkpoint::load(&args.checkpoint)?.restore_model()?;
    let split: Split = args.split.parse()?;
    let mode = parse_mode(args, &dataset)?;
    let report = evaluate(&model, &dataset, split, &mode, args.threshold)?;

    println!(
        "dataset {} split {} mode {} (threshold {}):",
        report.dataset, report.split, report.mode, report.threshold
    );
    for subset in &report.subsets {
        println!("  {:<12} n={:<4} F1 {:.4}", subset.subset, subset.n, subset.f1);
    }
    println!("  {:<12} n={:<4} F1 {:.4}", "average", report.n, report.average);

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let csv_path = out.join(format!(
            "eval-{}.csv",
            report.mode.replace([':', ',', '(', ')'], "_")
        ));
        std::fs::write(&csv_path, report.per_sample_csv())
            .map_err(|e| Error::io(&csv_path, e))?;
        let summary_path = out.join("eval-summary.toml");
        let summary = toml::to_string(&report)
            .map_err(|e| Error::Report(format!("summary serialization: {e}")))?;
        std::fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
        println!("per-sample rows: {}", csv_path.display());
    }
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let preset: Preset = args.preset.parse()?;
    let spec = PresetSpec::for_preset(preset);
    let variants = match &args.variants {
        Some(list) => list
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse())
            .collect::<Result<Vec<Variant>>>()?,
        None => preset.default_variants(),
    };
    let seeds = parse_seeds(&args.seeds)?;
    let threads = args.threads.unwrap_or_else(default_threads);
    eprintln!(
        "running {} variants x {} seeds ({} runs) on {threads} threads",
        variants.len(),
        seeds.len(),
        variants.len() * seeds.len()
    );
    run_experiment(preset, &variants, &seeds, &spec, &args.out, threads)?;
    let text = std::fs::read_to_string(args.out.join(preset.as_str()).join("report.txt"))
        .unwrap_or_default();
    println!("{text}");
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let text = report(&args.dir)?;
    println!("{text}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

mod bench;
mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] st4d::Error),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    /// 1 usage or config, 2 data, 3 numerical failure.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 3,
            CliError::Core(e) => match e {
                st4d::Error::InvalidArgument(_) => 1,
                st4d::Error::NonFinite(_) => 3,
                _ => 2,
            },
        }
    }
}

/// Spatio-temporal classifiers for 4D volumetric time series.
#[derive(Debug, Parser)]
#[command(name = "st4d", version)]
struct Cli {
    /// TOML config file with flat dotted keys (see the key list below).
    #[arg(long, global = true, env = "ST4D_CONFIG")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Applied after --config, before flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (T4DF files and a manifest).
    Synth(SynthArgs),
    /// Train a model, write checkpoints and a test-set report.
    Train(TrainArgs),
    /// Sliding-window subject-level evaluation of a checkpoint.
    Eval(EvalArgs),
    /// 64-bit finite-difference gradient check of micro-scale models.
    Gradcheck(GradcheckArgs),
    /// Time direct against im2col convolution and check they agree.
    Bench(BenchArgs),
    /// Print T4DF headers, checkpoint manifests or dataset manifests.
    Inspect(InspectArgs),
    /// Print the effective configuration after all overrides.
    ShowConfig,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory [config: synth.out]
    #[arg(long)]
    out: Option<String>,
    /// Generator seed [config: synth.seed]
    #[arg(long)]
    seed: Option<String>,
    /// Train subjects per class [config: synth.train_per_class]
    #[arg(long)]
    subjects_per_class: Option<String>,
    /// Val subjects per class [config: synth.val_per_class]
    #[arg(long)]
    val_per_class: Option<String>,
    /// Test subjects per class [config: synth.test_per_class]
    #[arg(long)]
    test_per_class: Option<String>,
    /// Volume extents XxYxZxT [config: synth.extents]
    #[arg(long)]
    extents: Option<String>,
    /// amplitude or phase-scrambled [config: synth.mode]
    #[arg(long)]
    mode: Option<String>,
    /// Class signal amplitude [config: synth.amplitude]
    #[arg(long)]
    amplitude: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest [config: data.manifest]
    #[arg(long)]
    manifest: Option<String>,
    /// Output directory [config: train.out]
    #[arg(long)]
    out: Option<String>,
    /// Model variant [config: model.variant]
    #[arg(long)]
    variant: Option<String>,
    /// Epochs [config: train.epochs]
    #[arg(long)]
    epochs: Option<String>,
    /// Crops per step [config: train.batch_size]
    #[arg(long)]
    batch_size: Option<String>,
    /// Adam learning rate [config: train.lr]
    #[arg(long)]
    lr: Option<String>,
    /// f32 or f64 [config: train.dtype]
    #[arg(long)]
    dtype: Option<String>,
    /// Shuffling and cropping seed [config: train.seed]
    #[arg(long)]
    seed: Option<String>,
    /// Validation sliding-window stride [config: data.stride]
    #[arg(long)]
    stride: Option<String>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to evaluate [config: eval.checkpoint]
    #[arg(long)]
    checkpoint: Option<String>,
    /// Dataset manifest [config: data.manifest]
    #[arg(long)]
    manifest: Option<String>,
    /// train, val or test [config: eval.split]
    #[arg(long)]
    split: Option<String>,
    /// Sliding-window stride [config: data.stride]
    #[arg(long)]
    stride: Option<String>,
    /// Fail unless the checkpoint holds this variant
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Variant to check; all four when omitted
    #[arg(long)]
    variant: Option<String>,
    /// Entries per parameter, 0 for all [config: gradcheck.max_entries]
    #[arg(long)]
    max_entries: Option<String>,
    /// Relative error bound [config: gradcheck.tolerance]
    #[arg(long)]
    tolerance: Option<String>,
    /// Richardson-extrapolate from steps h and 2h [config: gradcheck.extrapolate]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    extrapolate: Option<String>,
    /// Test hook: scale the backward rule of the first op with this tag by 1.5
    #[arg(long, value_name = "TAG")]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Conv spec, e.g. "rank=4 in=1 out=16 input=32x32x32x15 kernel=3 stride=1 pad=1 batch=1"; repeatable
    #[arg(long = "spec")]
    specs: Vec<String>,
    /// File with one spec per line ('#' comments); may be empty
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// f32 or f64 [default: f32]
    #[arg(long, default_value = "f32")]
    dtype: String,
    /// Timed repetitions per path; the minimum is reported
    #[arg(long, default_value_t = 1)]
    repeat: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// T4DF tensor, checkpoint or manifest files
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

fn flag_overrides(command: &Command) -> Vec<(&'static str, Option<String>)> {
    match command {
        Command::Synth(a) => vec![
            ("synth.out", a.out.clone()),
            ("synth.seed", a.seed.clone()),
            ("synth.train_per_class", a.subjects_per_class.clone()),
            ("synth.val_per_class", a.val_per_class.clone()),
            ("synth.test_per_class", a.test_per_class.clone()),
            ("synth.extents", a.extents.clone()),
            ("synth.mode", a.mode.clone()),
            ("synth.amplitude", a.amplitude.clone()),
        ],
        Command::Train(a) => vec![
            ("data.manifest", a.manifest.clone()),
            ("train.out", a.out.clone()),
            ("model.variant", a.variant.clone()),
            ("train.epochs", a.epochs.clone()),
            ("train.batch_size", a.batch_size.clone()),
            ("train.lr", a.lr.clone()),
            ("train.dtype", a.dtype.clone()),
            ("train.seed", a.seed.clone()),
            ("data.stride", a.stride.clone()),
        ],
        Command::Eval(a) => vec![
            ("eval.checkpoint", a.checkpoint.clone()),
            ("data.manifest", a.manifest.clone()),
            ("eval.split", a.split.clone()),
            ("data.stride", a.stride.clone()),
        ],
        Command::Gradcheck(a) => vec![
            ("gradcheck.max_entries", a.max_entries.clone()),
            ("gradcheck.tolerance", a.tolerance.clone()),
            ("gradcheck.extrapolate", a.extrapolate.clone()),
        ],
        _ => Vec::new(),
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.load_file(p)?;
    }
    for kv in &cli.set {
        cfg.apply_assignment(kv)?;
    }
    for (k, v) in flag_overrides(&cli.command) {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Train(a) => commands::train(&cfg, a.resume.as_deref()),
        Command::Eval(a) => commands::eval(&cfg, a.variant.as_deref()),
        Command::Gradcheck(a) => commands::gradcheck(&cfg, a.variant.as_deref(), a.inject_fault.as_deref()),
        Command::Bench(a) => bench::run(&a.specs, a.sweep.as_deref(), &a.dtype, a.repeat),
        Command::Inspect(a) => commands::inspect(&a.paths),
        Command::ShowConfig => {
            print!("{}", cfg.dump());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let help = config::keys_help();
    let cmd = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|s| s.after_long_help(help.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

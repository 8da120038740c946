//! `smug`: data generation, training, reconstruction, attacks and robustness
//! reports for smoothed unrolled MRI reconstruction.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! command fails while running.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use smug_core::dataset::Split;
use smug_core::robustness::SweepAxis;
use smug_core::training::UStabReference;
use smug_core::unrolling::Mode;

use commands::{Common, EvalOverrides, TrainKind, TrainOverrides};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "smug", version, about = "Smoothed unrolled MRI reconstruction toolkit")]
struct Cli {
    /// Worker threads; 1 gives the reference single-threaded schedule.
    #[arg(long, global = true, env = "SMUG_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run configuration; omitted sections and keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed override (dataset seed for generate-data, run seeds otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Write into an existing, non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            out: a.out,
            seed: a.seed,
            force: a.force,
        }
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Directory written by generate-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue the run saved in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Directory written by generate-data.
    #[arg(long)]
    data: PathBuf,
    /// Attack radius override.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Attack the noiseless base model instead of the smoothed one.
    #[arg(long)]
    attack_base: bool,
}

impl EvalArgs {
    fn overrides(&self) -> EvalOverrides {
        EvalOverrides {
            epsilon: self.epsilon,
            attack_base: self.attack_base,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Epsilon,
    SamplingRate,
    UnrollSteps,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Epsilon => SweepAxis::Epsilon,
            AxisArg::SamplingRate => SweepAxis::SamplingRate,
            AxisArg::UnrollSteps => SweepAxis::UnrollSteps,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantom train/val/test splits.
    GenerateData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        acceleration: Option<usize>,
    },
    /// Pre-train the denoiser on noisy ground-truth images.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the unrolled network end to end on reconstruction error.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Starting checkpoint (random initialization when omitted).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Fine-tune a pre-trained denoiser with the unrolled stability loss.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Pre-trained checkpoint.
        #[arg(long)]
        init: PathBuf,
        /// Frozen denoiser for the frozen reference variants.
        #[arg(long)]
        frozen: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        reference: Option<UStabReference>,
        #[arg(long)]
        lambda_ell: Option<f64>,
    },
    /// Reconstruct a split and write images, previews and metrics.
    Reconstruct {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Clean, noisy-input and PGD-attacked accuracy of each model.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Model as LABEL=CHECKPOINT; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
    },
    /// Metrics of each model along one perturbation axis.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, value_enum)]
        axis: AxisArg,
    },
    /// Epsilon sweep over one model per UStab reference.
    Ablation {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Variant as REFERENCE=CHECKPOINT; all five references are required.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
    },
    /// Merge attack tables into one comparison against a baseline.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Output directory of an `attack` run; repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "vanilla")]
        baseline: String,
    },
}

fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else {
        return Ok(());
    };
    if n == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::GenerateData { common, acceleration } => commands::generate_data(&common.into(), acceleration),
        Command::Pretrain { common, train } => commands::run_training(
            &common.into(),
            &train.data,
            &TrainKind::Pretrain,
            &TrainOverrides {
                epochs: train.epochs,
                resume: train.resume,
                ..TrainOverrides::default()
            },
        ),
        Command::Train {
            common,
            train,
            init,
            mode,
        } => commands::run_training(
            &common.into(),
            &train.data,
            &TrainKind::Supervised { init },
            &TrainOverrides {
                epochs: train.epochs,
                mode,
                resume: train.resume,
                ..TrainOverrides::default()
            },
        ),
        Command::Finetune {
            common,
            train,
            init,
            frozen,
            mode,
            reference,
            lambda_ell,
        } => commands::run_training(
            &common.into(),
            &train.data,
            &TrainKind::Finetune { init, frozen },
            &TrainOverrides {
                epochs: train.epochs,
                mode,
                reference,
                lambda_ell,
                resume: train.resume,
            },
        ),
        Command::Reconstruct {
            common,
            data,
            checkpoint,
            mode,
            split,
        } => commands::reconstruct_split(&common.into(), &data, &checkpoint, mode, split.into()),
        Command::Attack { common, eval, models } => {
            commands::attack(&common.into(), &eval.data, &models, &eval.overrides())
        }
        Command::Sweep {
            common,
            eval,
            models,
            axis,
        } => commands::sweep(&common.into(), &eval.data, &models, axis.into(), &eval.overrides()),
        Command::Ablation { common, eval, variants } => {
            commands::ablation(&common.into(), &eval.data, &variants, &eval.overrides())
        }
        Command::Report {
            out,
            force,
            runs,
            baseline,
        } => commands::report(&out, force, &runs, &baseline),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

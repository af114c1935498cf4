//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clom::config::ExperimentConfig;
use clom::experiment::{self, EvalMode, Sweep};
use clom::metrics::metrics_csv;
use clom::selftest;

#[derive(Parser, Debug)]
#[command(name = "clom", version, about = "Class-incremental learning with masked OOD-aware task heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the task sequence, checkpointing after every task.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Cil)]
        mode: Mode,
        /// Apply the stored calibration (CIL only).
        #[arg(long)]
        calibrated: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refit the calibration of a checkpoint on its memory buffer.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use only this many memory samples per class.
        #[arg(long)]
        per_class: Option<usize>,
        /// Where to write the recalibrated checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        sweep: SweepArg,
    },
    /// Run the built-in verification suites on synthetic inputs.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the sigmoid backward pass (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the accuracy matrices stored in a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Til,
    Cil,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepArg {
    S,
    Memory,
    Augment,
}

fn resolve(common: &Common) -> clom::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_out(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn run(cli: Cli) -> clom::Result<bool> {
    match cli.command {
        Command::Train { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let (state, summary) = experiment::run_train(&cfg, checkpoint.as_deref())?;
            println!(
                "trained {} tasks: TIL {:.2}%  CIL {:.2}%  CIL calibrated {:.2}%",
                state.next_task,
                100.0 * summary.til,
                100.0 * summary.cil,
                100.0 * summary.cil_calibrated
            );
            if let Some(f) = summary.forgetting {
                println!("forgetting rate: {:.3}%", 100.0 * f);
            }
            println!("results written to {}", state.config.out_dir.display());
        }
        Command::Eval { checkpoint, mode, calibrated, out } => {
            let out = out.unwrap_or_else(|| default_out(&checkpoint));
            let mode = match mode {
                Mode::Til => EvalMode::Til,
                Mode::Cil => EvalMode::Cil,
            };
            let rows = experiment::run_eval(&checkpoint, mode, calibrated, &out)?;
            print!("{}", metrics_csv(&rows));
        }
        Command::Calibrate { checkpoint, per_class, out } => {
            let out = out.unwrap_or_else(|| default_out(&checkpoint).join("calibrated.ckpt"));
            let p = experiment::run_calibrate(&checkpoint, per_class, &out)?;
            for (t, (s, m)) in p.sigma.iter().zip(&p.mu).enumerate() {
                println!("task {}: sigma {s:.5} mu {m:.5}", t + 1);
            }
            println!("calibrated checkpoint written to {}", out.display());
        }
        Command::Ablate { common, sweep } => {
            let cfg = resolve(&common)?;
            let sweep = match sweep {
                SweepArg::S => Sweep::S,
                SweepArg::Memory => Sweep::Memory,
                SweepArg::Augment => Sweep::Augment,
            };
            let (path, rows) = experiment::run_ablation(&cfg, sweep)?;
            print!("{}", experiment::ablation_csv(&rows));
            println!("written to {}", path.display());
        }
        Command::Selftest { seed, inject_fault } => {
            let checks = selftest::run_all(seed, inject_fault)?;
            print!("{}", selftest::render(&checks));
            let ok = checks.iter().all(|c| c.passed);
            println!("{}", if ok { "all suites passed" } else { "SELFTEST FAILED" });
            return Ok(ok);
        }
        Command::Report { checkpoint } => print!("{}", experiment::run_report(&checkpoint)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use horde_cli::commands::{
    cmd_ablation, cmd_eval, cmd_probe, cmd_sketch_selftest, cmd_synth_digits, cmd_synth_mixture,
    cmd_verify_bounds, EvalMode,
};
use horde_cli::config::RunConfig;
use horde_cli::train::cmd_train;

#[derive(Parser)]
#[command(
    name = "horde",
    about = "Train, evaluate, and verify high-order moment regularized embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint's retrieval quality.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// plain | concat-pca
        #[arg(long, default_value = "plain")]
        mode: EvalMode,
        /// Recall cutoffs, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        k: Vec<usize>,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feature-subsampling robustness probe.
    Probe {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Fraction of spatial positions to keep.
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify the MMD/Wasserstein bound chain on two CSV sample sets.
    /// Exits nonzero if any certified inequality fails.
    VerifyBounds {
        i_csv: PathBuf,
        j_csv: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistical self-tests of the sketch estimator. Exits nonzero on
    /// failure.
    SketchSelftest {
        #[arg(long, default_value_t = 8)]
        c: usize,
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every configured stack mode over a range of orders and emit
    /// the (k, n) retrieval grid.
    Ablation {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic datasets.
    SynthData {
        #[command(subcommand)]
        what: SynthCommand,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Rendered digit images as IDX train/test pairs.
    Digits {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 600)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Gaussian-mixture feature sets as one CSV per class.
    Mixture {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 0.2)]
        spread: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn emit<T: serde::Serialize>(report: &T, out: &Option<PathBuf>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    Ok(())
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = cmd_train(&cfg)?;
            println!(
                "trained {} steps; checkpoint: {}; metrics: {}",
                outcome.steps_run,
                outcome.checkpoint_dir.display(),
                outcome.metrics_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            config,
            ckpt,
            mode,
            k,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_eval(&cfg, &ckpt, mode, &k)?;
            emit(&report, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Probe {
            config,
            ckpt,
            rho,
            seed,
            k,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_probe(&cfg, &ckpt, rho, seed, &k)?;
            emit(&report, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyBounds {
            i_csv,
            j_csv,
            gamma,
            p,
            out,
        } => {
            let report = cmd_verify_bounds(&i_csv, &j_csv, gamma, p)?;
            emit(&report, &out)?;
            if report.all_ok() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("bound certification FAILED");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::SketchSelftest {
            c,
            d,
            k,
            trials,
            seed,
            out,
        } => {
            let report = cmd_sketch_selftest(c, d, k, trials, seed)?;
            emit(&report, &out)?;
            if report.passed {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("sketch selftest FAILED");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Ablation { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_ablation(&cfg)?;
            emit(&report, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SynthData { what } => {
            match what {
                SynthCommand::Digits {
                    out_dir,
                    train_per_class,
                    test_per_class,
                    seed,
                } => {
                    cmd_synth_digits(&out_dir, train_per_class, test_per_class, seed)?;
                    println!("wrote digit IDX pairs to {}", out_dir.display());
                }
                SynthCommand::Mixture {
                    out_dir,
                    classes,
                    per_class,
                    dim,
                    spread,
                    seed,
                } => {
                    let files = cmd_synth_mixture(&out_dir, classes, per_class, dim, spread, seed)?;
                    for f in files {
                        println!("wrote {}", f.display());
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use consistent_evidence::harness::{self, TrainArgs, JOBS_ENV};
use consistent_evidence::losses::RegMode;

#[derive(Parser)]
#[command(version, about = "Consistency checks and regularized training for task/evidence predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a predictions file against a constraint spec.
    Validate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single model.
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        omega1: f64,
        #[arg(long, default_value_t = 0.0)]
        omega2: f64,
        #[arg(long, default_value_t = RegMode::Hard)]
        mode: RegMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every point of a coefficient grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Concurrent runs; defaults to the CPU count.
        #[arg(long, env = JOBS_ENV)]
        jobs: Option<usize>,
    },
    /// Merge sweep results into one comparison table.
    Report {
        /// Sweep output directories or their `result.json` files.
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Validate { spec, predictions, out } => {
            let report = harness::cmd_validate(&spec, &predictions, &out)
                .with_context(|| format!("validating {}", predictions.display()))?;
            println!("n={} r1={:.6} r2={:.6}", report.n, report.r1_total, report.r2_total);
        }
        Command::Gen { config, out } => {
            let data = harness::cmd_gen(&config, &out).with_context(|| format!("generating from {}", config.display()))?;
            println!(
                "train_pairs={} validation={} test={}",
                data.train.len(),
                data.validation.len(),
                data.test.len()
            );
        }
        Command::Train {
            spec,
            data,
            config,
            omega1,
            omega2,
            mode,
            seed,
            out,
        } => {
            let args = TrainArgs {
                spec,
                data,
                config,
                omega1,
                omega2,
                mode,
                seed,
                out,
            };
            let m = harness::cmd_train(&args).context("training")?;
            println!(
                "acc_y={:.4} auc_y={:.4} r1={:.4} r2={:.4}",
                m.acc_y, m.auc_y, m.report.r1_total, m.report.r2_total
            );
        }
        Command::Sweep { grid, out, jobs } => {
            let result = harness::cmd_sweep(&grid, &out, jobs).with_context(|| format!("sweep {}", grid.display()))?;
            for a in &result.aggregates {
                println!(
                    "omega1={} omega2={} r1={:.4}±{:.4} r2={:.4}±{:.4} acc_y={:.4}±{:.4}",
                    a.omega1, a.omega2, a.r1.mean, a.r1.std, a.r2.mean, a.r2.std, a.acc_y.mean, a.acc_y.std
                );
            }
            if !result.failures.is_empty() {
                for f in &result.failures {
                    eprintln!("failed omega1={} omega2={} seed={}: {}", f.omega1, f.omega2, f.seed, f.error);
                }
                bail!("{} of {} runs failed", result.failures.len(), result.failures.len() + result.rows.len());
            }
        }
        Command::Report { inputs, out } => {
            harness::cmd_report(&inputs, &out).context("building report")?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

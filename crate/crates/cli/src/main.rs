use std::path::PathBuf;
use std::process::ExitCode;

use bddm_cli::commands::{self, *};
use bddm_cli::CliResult;
use clap::{Parser, Subcommand};

/// Bilateral denoising diffusion on synthetic data.
#[derive(Parser)]
#[command(name = "bddm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the noise-prediction network.
    TrainScore {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the schedule network against a frozen score checkpoint.
    TrainSchedule {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search the schedule seed and persist the best schedule.
    Schedule {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        schedule_net: PathBuf,
        #[arg(long)]
        grid_m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples with a persisted schedule.
    Sample {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        count: usize,
        /// ddpm or ddim.
        #[arg(long)]
        process: Option<String>,
        #[arg(long)]
        eta: Option<f64>,
        /// beta or beta_tilde (ddpm only).
        #[arg(long)]
        variance_mode: Option<String>,
        /// Supplies sampler defaults; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo comparison of the two lower bounds over a grid of t.
    CompareBounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        score: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustive search over 9^N candidate schedules (N <= 6).
    GsBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a sample CSV with held-out data.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::TrainScore { config, seed, out } => {
            train_score(&TrainScoreArgs {
                config: &config,
                seed,
                out: &out,
            })?;
        }
        Command::TrainSchedule {
            config,
            seed,
            score,
            out,
        } => {
            train_schedule(&TrainScheduleArgs {
                config: &config,
                seed,
                score: &score,
                out: &out,
            })?;
        }
        Command::Schedule {
            config,
            seed,
            score,
            schedule_net,
            grid_m,
            out,
        } => {
            commands::schedule(&ScheduleArgs {
                config: &config,
                seed,
                score: &score,
                schedule_net: &schedule_net,
                grid_m,
                out: &out,
            })?;
        }
        Command::Sample {
            schedule,
            score,
            count,
            process,
            eta,
            variance_mode,
            config,
            seed,
            out,
        } => {
            sample_cmd(&SampleArgs {
                schedule: &schedule,
                score: &score,
                count,
                process: process.as_deref(),
                eta,
                variance_mode: variance_mode.as_deref(),
                config: config.as_deref(),
                seed,
                out: &out,
            })?;
        }
        Command::CompareBounds {
            config,
            seed,
            score,
            out,
        } => {
            compare_bounds(&CompareBoundsArgs {
                config: &config,
                seed,
                score: score.as_deref(),
                out: &out,
            })?;
        }
        Command::GsBaseline {
            config,
            seed,
            score,
            steps,
            out,
        } => {
            gs_baseline_cmd(&GsBaselineArgs {
                config: &config,
                seed,
                score: &score,
                steps,
                out: &out,
            })?;
        }
        Command::Evaluate {
            config,
            seed,
            samples,
            out,
        } => {
            evaluate(&EvaluateArgs {
                config: &config,
                seed,
                samples: &samples,
                out: &out,
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BDDM_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

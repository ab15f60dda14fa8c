use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use confdqn::agents::Algorithm;
use confdqn::config::RunConfig;
use confdqn::pipeline;
use confdqn::{Error, Result};

/// Offline ventilation-policy learning with conformal action filtering.
#[derive(Parser)]
#[command(name = "confdqn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory. Takes precedence over CONFDQN_OUT and the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed for simulation, run seeds and FQE.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::for_invocation(self.config.as_deref(), self.out.clone(), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate patients, impute, flag OOD and write the splits.
    GenData(Common),
    /// Train every configured algorithm, or one with --algorithm.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        algorithm: Option<Algorithm>,
    },
    /// Compute the conformal threshold for each ConformalDQN run.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Recompute the threshold at a new alpha from stored scores.
    Retune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: f64,
    },
    /// Fitted Q evaluation of the logged and trained policies.
    Evaluate(Common),
    /// Write report.md from the evaluation outputs.
    Report(Common),
}

fn set_alpha(cfg: &mut RunConfig, alpha: Option<f64>) -> Result<()> {
    if let Some(a) = alpha {
        cfg.agents.get_mut(Algorithm::ConformalDqn).alpha = Some(a);
        cfg.validate()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let m = pipeline::gen_data(&cfg)?;
            println!("{m}");
            println!("wrote {}", cfg.out_dir.join("data").display());
        }
        Command::Train { common, algorithm } => {
            let cfg = common.load()?;
            let algs = match algorithm {
                Some(a) => vec![a],
                None => cfg.algorithms_sorted(),
            };
            for alg in algs {
                println!("{}", pipeline::train_algorithm(&cfg, alg)?);
            }
        }
        Command::Calibrate { common, alpha } => {
            let mut cfg = common.load()?;
            set_alpha(&mut cfg, alpha)?;
            println!("{}", pipeline::calibrate_runs(&cfg)?);
        }
        Command::Retune { common, alpha } => {
            let cfg = common.load()?;
            println!("{}", pipeline::retune_runs(&cfg, alpha)?);
        }
        Command::Evaluate(c) => {
            let cfg = c.load()?;
            let (report, lines) = pipeline::evaluate_runs(&cfg)?;
            for p in &report.policies {
                println!(
                    "{:<14} value {:.4} ± {:.4}  survival {:.2}%",
                    p.policy, p.initial_value.mean, p.initial_value.std, p.survival_pct.mean
                );
            }
            for l in lines {
                println!("{l}");
            }
            println!("wrote {}", cfg.out_dir.join("eval").display());
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            println!("wrote {}", pipeline::write_report(&cfg.out_dir)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}

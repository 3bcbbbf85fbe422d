mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use singtraj_core::endpoint::JacobianMethod;
use singtraj_core::Point;

use crate::artifacts::Artifacts;
use crate::commands::{PerturbArgs, ThresholdArgs, VerifyArgs};
use crate::config::{ConfigError, RunConfig};

/// Dependence loci and singular trajectories of three-field driftless systems.
#[derive(Parser)]
#[command(name = "singtraj", version)]
struct Cli {
    /// Run configuration (`key = value` lines); defaults to the seed system.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for CSV and JSON artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Variational,
    FiniteDifference,
}

impl From<Method> for JacobianMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Variational => JacobianMethod::Variational,
            Method::FiniteDifference => JacobianMethod::FiniteDifference,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Detect Σ on the grid and check regularity and transversality.
    Locus,
    /// Integrate a characteristic trajectory from a point of Σ.
    Traj {
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        x0: Point,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// Lift a characteristic trajectory to a singular extremal.
    Lift {
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        x0: Point,
        /// Adjoint scale p3(0).
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        a: f64,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// Certify the rank of the endpoint mapping at a discretized control.
    Verify {
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        x0: Point,
        /// Control intervals; `num.N` from the config if omitted.
        #[arg(long = "N")]
        intervals: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long, value_enum, default_value_t = Method::Variational)]
        method: Method,
        /// Certify a random control drawn from this seed instead of the characteristic one.
        #[arg(long, value_name = "SEED")]
        random: Option<u64>,
    },
    /// Openness experiment: perturb the system and rerun the pipeline.
    Perturb {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Control intervals used for re-certification.
        #[arg(long, default_value_t = 200)]
        intervals: usize,
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true, default_value = "0,-0.5,0.125")]
        x0: Point,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        /// Also bracket the breakdown size by doubling and bisection from `--eps`.
        #[arg(long)]
        threshold: bool,
        #[arg(long, default_value_t = 25)]
        threshold_trials: usize,
        #[arg(long, default_value_t = 2.0)]
        threshold_cap: f64,
        #[arg(long, default_value_t = 4)]
        bisections: usize,
    },
    /// Run the whole pipeline on the seed system and print a summary.
    Demo,
}

fn parse_point(s: &str) -> Result<Point, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] if parts.iter().all(|v| v.is_finite()) => Ok(Point::new(a, b, c)),
        _ => Err(format!("expected three finite comma-separated numbers, got '{s}'")),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: 0,
        column: 0,
        message: format!("reading {}: {e}", path.display()),
    })?;
    RunConfig::parse(&text)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_ref())?;
    if let Command::Demo = cli.command {
        return commands::demo(&cfg);
    }
    let sys = cfg.build_system()?;
    let mut out = Artifacts::new(&cli.out);
    match cli.command {
        Command::Locus => commands::locus(&sys, &cfg, &mut out)?,
        Command::Traj { x0, duration } => commands::traj(&sys, &cfg, &x0, duration, &mut out)?,
        Command::Lift { x0, a, duration } => commands::lift(&sys, &cfg, &x0, a, duration, &mut out)?,
        Command::Verify {
            x0,
            intervals,
            duration,
            method,
            random,
        } => {
            let args = VerifyArgs {
                x0,
                intervals: intervals.unwrap_or(cfg.intervals),
                duration,
                method: method.into(),
                random,
            };
            commands::verify(&sys, &cfg, &args, &mut out)?
        }
        Command::Perturb {
            trials,
            eps,
            seed,
            intervals,
            x0,
            duration,
            threshold,
            threshold_trials,
            threshold_cap,
            bisections,
        } => {
            let args = PerturbArgs {
                trials,
                eps,
                seed,
                intervals,
                x0,
                duration,
                threshold: threshold.then_some(ThresholdArgs {
                    trials: threshold_trials,
                    cap: threshold_cap,
                    bisections,
                }),
            };
            commands::perturb(&sys, &cfg, &args, &mut out)?
        }
        Command::Demo => unreachable!(),
    }
    for path in out.commit() {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

//! `gpdyn`: generate data, fit posteriors, predict ensembles and sweep the
//! density × noise grid.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.

mod config;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpdyn::ErrorClass;

use config::{ExperimentConfig, Scenario, SystemKind};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GPDYN_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: gpdyn::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core { source, .. } => match source.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

/// Attach run context to library errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for gpdyn::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "gpdyn",
    version,
    about = "Learn parametrized dynamics from sparse, noisy data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a benchmark system and write training and test CSVs.
    Generate(Common),
    /// Fit GP state models and the parameter posterior.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Training CSV written by `generate`; repeat for several trajectories.
        #[arg(long = "data")]
        data: Vec<PathBuf>,
    },
    /// Propagate a fitted posterior through the dynamics.
    Predict {
        #[command(flatten)]
        common: Common,
        /// `posterior.json` or the fit directory holding it.
        #[arg(long)]
        posterior: PathBuf,
        /// Initial condition, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        ic: Option<Vec<f64>>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Sweep density × noise × seed and compare against FD+LinReg.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        densities: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        noises: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    system: Option<SystemKind>,
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.system {
            cfg.system = Some(s);
        }
        if let Some(s) = self.scenario {
            cfg.scenario = s;
        }
        if let Some(d) = self.density {
            cfg.data.density = Some(d);
        }
        if let Some(n) = self.noise {
            cfg.data.noise_level = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf, CliError> {
    if let Some(o) = &cfg.out {
        return Ok(o.clone());
    }
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    Ok(root.join(format!(
        "{command}-{}-{}-s{}",
        cfg.system()?,
        cfg.scenario,
        cfg.seed
    )))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            let out = out_dir(&cfg, "generate")?;
            run::generate(&cfg, &out, &argv)
        }
        Command::Fit { common, data } => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            let out = out_dir(&cfg, "fit")?;
            run::fit(&cfg, &data, &out, &argv).map(|_| ())
        }
        Command::Predict {
            common,
            posterior,
            ic,
            t_end,
            dt,
            draws,
        } => {
            let mut cfg = common.resolve()?;
            let explicit_seed = common.seed.is_some() || common.config.is_some();
            if let Some(ic) = ic {
                cfg.prediction.initial_condition = Some(ic);
            }
            if t_end.is_some() {
                cfg.prediction.t_end = t_end;
            }
            if dt.is_some() {
                cfg.prediction.dt = dt;
            }
            if let Some(d) = draws {
                cfg.prediction.draws = d;
            }
            let out = match &cfg.out {
                Some(o) => o.clone(),
                None => run::artifact_dir(&posterior).join("predict"),
            };
            run::predict(&cfg, explicit_seed, &posterior, &out, &argv)
        }
        Command::Benchmark {
            common,
            densities,
            noises,
            seeds,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(d) = densities {
                cfg.benchmark.densities = d;
            }
            if let Some(n) = noises {
                cfg.benchmark.noise_levels = n;
            }
            if let Some(s) = seeds {
                cfg.benchmark.seeds = s;
            }
            cfg.validate()?;
            let out = out_dir(&cfg, "benchmark")?;
            run::benchmark(&cfg, &out, &argv)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

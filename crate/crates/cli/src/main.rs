//! `flowpress`: presets, sweeps, fits and reports for flow pressure
//! experiments.
//!
//! Exit codes: 0 on success, 2 when a hard invariant fails, 1 for any
//! other error (bad config, domain gate, numerical failure, I/O).

mod commands;
mod config;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowpress_core::ekp::Envelope;

use commands::{execute, Command, Options};
use config::{cmd_preset, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("unknown preset {0:?} (expected firstmain, secmain_a, secmain_b, gamma1, lsv_demo)")]
    UnknownPreset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}: {1}")]
    Io(String, std::io::Error),

    #[error(transparent)]
    Compute(#[from] flowpress_core::Error),

    #[error("hard invariant failed: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invariant(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "flowpress", version, about = "Pressure of suspension flows: sweeps, fits and reports")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Debug)]
struct Source {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Print (or write to --out) the config of a preset.
    Preset {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep plus every requested fit.
    Run(Source),
    /// Pressure and derivatives on the sweep grid.
    PressureSweep(Source),
    /// EKP exponent, envelope margins and the linear regime.
    EkpFit(Source),
    /// Left-side EKP test on periodic orbits (gamma = 1 only).
    Counterexample {
        #[command(flatten)]
        source: Source,
        /// Envelope prefactor.
        #[arg(long, default_value_t = commands::COUNTEREXAMPLE_C)]
        c: f64,
        /// Envelope exponent.
        #[arg(long, default_value_t = commands::COUNTEREXAMPLE_RHO)]
        rho: f64,
        /// Comma-separated orbit indices.
        #[arg(long, value_delimiter = ',')]
        k: Vec<u64>,
    },
    /// Lower bound for p(s) at negative s (gamma = 1 only).
    LeftBound {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = -0.01, allow_negative_numbers = true)]
        s: f64,
    },
    /// Transfer-operator backend for the LSV model.
    Lsv(Source),
    /// Laplace-moment asymptotics and variances.
    Moments(Source),
}

fn load(source: &Source) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let cfg = match (&source.config, &source.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => cmd_preset(name)?,
        (None, None) => return Err(CliError::Config("one of --config or --preset is required".into())),
    };
    let dir = source.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    Ok((cfg, dir))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut opts = Options::default();
    let (source, command) = match cli.command {
        Sub::Preset { name, out } => {
            let cfg = cmd_preset(&name)?;
            let text = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(dir.display().to_string(), e))?;
                    let path = dir.join("config.json");
                    std::fs::write(&path, text).map_err(|e| CliError::Io(path.display().to_string(), e))?;
                }
                None => print!("{text}"),
            }
            return Ok(());
        }
        Sub::Run(s) => (s, Command::Run),
        Sub::PressureSweep(s) => (s, Command::PressureSweep),
        Sub::EkpFit(s) => (s, Command::EkpFit),
        Sub::Counterexample { source, c, rho, k } => {
            opts.envelope = Envelope { rho, c };
            if !k.is_empty() {
                opts.k_list = k;
            }
            (source, Command::Counterexample)
        }
        Sub::LeftBound { source, s } => {
            opts.left_s = s;
            (source, Command::LeftBound)
        }
        Sub::Lsv(s) => (s, Command::Lsv),
        Sub::Moments(s) => (s, Command::Moments),
    };
    let (cfg, dir) = load(&source)?;
    execute(&cfg, &dir, command, &opts)?;
    eprintln!("{}: wrote {}", command.name(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for invariants.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowpress: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

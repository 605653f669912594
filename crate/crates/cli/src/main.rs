//! `esdkit`: generate data, train with calibration objectives, sweep and
//! select hyperparameters, evaluate and post-process predictions, and run
//! the estimator verification studies.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! precondition failure, 3 verification failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    /// A bug rather than a user error; reported as a runtime failure.
    pub fn internal(message: impl Into<String>) -> Self {
        Self::runtime(format!("internal error: {}", message.into()))
    }
}

impl From<esdkit::Error> for CliError {
    fn from(e: esdkit::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "esdkit",
    version,
    about = "Calibration toolkit built around the ESD objective"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the config-driven commands.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file; see docs/config.md.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `output.dir`, then $ESDKIT_OUT_DIR, then ./esdkit-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as `--key value` or `--section.key value`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as JSON.
    Generate(RunArgs),
    /// Train one model; writes a checkpoint, logit dumps and the history.
    Train(RunArgs),
    /// Lambda (and inner hyperparameter) sweep with model selection.
    Sweep(RunArgs),
    /// Calibration metrics of a prediction CSV or logit dump.
    Evaluate(commands::EvaluateArgs),
    /// Fit temperature or vector scaling on validation logits, apply to test.
    Calibrate(commands::CalibrateArgs),
    /// Monte Carlo verification of the ESD estimators.
    Verify(commands::VerifyArgs),
    /// Cumulative accuracy/confidence curves as CSV.
    Curves(commands::CurvesArgs),
}

impl RunArgs {
    /// Once the first override is seen clap hands every later token to
    /// `overrides`, including `--config` and `--out`; move those back.
    fn normalized(mut self) -> Result<Self, CliError> {
        let mut rest = Vec::with_capacity(self.overrides.len());
        let mut tokens = std::mem::take(&mut self.overrides).into_iter();
        while let Some(tok) = tokens.next() {
            let (flag, inline) = match tok.split_once('=') {
                Some((f, v)) => (f.to_string(), Some(v.to_string())),
                None => (tok.clone(), None),
            };
            let slot = match flag.as_str() {
                "--config" => &mut self.config,
                "--out" => &mut self.out,
                _ => {
                    rest.push(tok);
                    continue;
                }
            };
            let value = inline
                .or_else(|| tokens.next())
                .ok_or_else(|| CliError::usage(format!("flag `{flag}` needs a value")))?;
            if slot.replace(PathBuf::from(value)).is_some() {
                return Err(CliError::usage(format!("flag `{flag}` given twice")));
            }
        }
        self.overrides = rest;
        Ok(self)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => {
            let a = a.normalized()?;
            commands::generate(a.config.as_deref(), a.out.as_deref(), &a.overrides)
        }
        Command::Train(a) => {
            let a = a.normalized()?;
            commands::train(a.config.as_deref(), a.out.as_deref(), &a.overrides)
        }
        Command::Sweep(a) => {
            let a = a.normalized()?;
            commands::sweep(a.config.as_deref(), a.out.as_deref(), &a.overrides)
        }
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Curves(a) => commands::curves(&a),
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
            eprintln!("esdkit: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

mod eval;
mod frames;
mod matchdump;
mod overlay;
mod run;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nrmosaic::Config;

/// Non-rigid SLAM and mosaicking of deforming image sequences.
#[derive(Parser)]
#[command(name = "nrmosaic", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a frame sequence and build its mosaic.
    Mosaic(run::MosaicArgs),
    /// Render a synthetic deforming scan with ground truth.
    Synth(synth::SynthArgs),
    /// Score a mosaic run against a synthetic scene.
    Eval(eval::EvalArgs),
    /// Detect and match features between two images.
    MatchDump(matchdump::MatchDumpArgs),
}

/// Options shared by commands that read a pipeline config.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Pipeline config file (TOML); defaults are used when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set alpha=1e-4` or `--set estimator.neighbors=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => Config::default(),
        };
        for assignment in &self.overrides {
            config.apply_override(assignment).with_context(|| format!("applying --set {assignment}"))?;
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Mosaic(a) => run::run(&a),
        Command::Synth(a) => synth::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::MatchDump(a) => matchdump::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! The `match-dump` command.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use nrmosaic::features::{detect_and_match, format_matches};
use nrmosaic::raster::load_color;
use nrmosaic::resolve_scaled_params;

use crate::ConfigArgs;

#[derive(Args, Debug)]
pub struct MatchDumpArgs {
    pub first: PathBuf,
    pub second: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Write matches here instead of stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

pub fn run(args: &MatchDumpArgs) -> Result<()> {
    let config = args.config.load()?;
    let a = load_color(&args.first).with_context(|| format!("reading {}", args.first.display()))?;
    let b = load_color(&args.second).with_context(|| format!("reading {}", args.second.display()))?;
    let params = resolve_scaled_params(&config, a.width, a.height);
    let matches = detect_and_match(&a.to_gray(), &b.to_gray(), &params.detector)?;
    let text = format_matches(&matches);
    match &args.output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    eprintln!("{} matches", matches.len());
    Ok(())
}

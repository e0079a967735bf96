//! The `synth` command.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use nrmosaic::raster::save_color;
use nrmosaic::synth::{SceneConfig, SyntheticScene};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for frames, correspondence maps and `scene.toml`.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Scene file (TOML); defaults are used when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Override a scene value, e.g. `--set path=\"out-and-back\"`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Skip writing correspondence maps.
    #[arg(long)]
    pub no_maps: bool,
}

pub fn load_scene(args: &SynthArgs) -> Result<SceneConfig> {
    let mut cfg = match &args.scene {
        Some(p) => SceneConfig::load(p).with_context(|| format!("reading scene {}", p.display()))?,
        None => SceneConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(frames) = args.frames {
        cfg.frames = frames;
    }
    for assignment in &args.overrides {
        cfg.apply_override(assignment).with_context(|| format!("applying --set {assignment}"))?;
    }
    Ok(cfg)
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let cfg = load_scene(args)?;
    let scene = SyntheticScene::new(cfg.clone())?;
    std::fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    std::fs::write(args.output.join("scene.toml"), cfg.to_toml_string())?;
    for t in 0..scene.frame_count() {
        let (frame, map) = scene.render(t);
        save_color(&args.output.join(format!("frame_{t:05}.png")), &frame)?;
        if !args.no_maps {
            map.save(&args.output.join(format!("map_{t:05}.nrmc")))?;
        }
    }
    eprintln!("{} frames of {}×{} written to {}", scene.frame_count(), cfg.width, cfg.height, args.output.display());
    Ok(())
}

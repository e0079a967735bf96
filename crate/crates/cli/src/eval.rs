//! The `eval` command.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use nrmosaic::raster::load_rgba;
use nrmosaic::synth::{evaluate, FrameNodes, SceneConfig, SyntheticScene};
use nrmosaic::Canvas;

use crate::run::{write_json, MosaicMeta};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directory of a `mosaic` run.
    pub run: PathBuf,
    /// Scene file, or the `synth` output directory holding `scene.toml`.
    #[arg(long)]
    pub scene: PathBuf,
    /// Write the report here as well as to stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Score node trajectories only.
    #[arg(long)]
    pub no_mosaic: bool,
}

pub fn read_nodes(path: &Path) -> Result<Vec<FrameNodes>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), k + 1))?);
    }
    Ok(out)
}

/// Rebuilds a canvas from a written mosaic; every opaque pixel counts once.
fn read_canvas(run: &Path) -> Result<Canvas> {
    let meta_path = run.join("mosaic_meta.json");
    let meta: MosaicMeta = serde_json::from_slice(&std::fs::read(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?)
        .with_context(|| format!("parsing {}", meta_path.display()))?;
    let (image, mask) = load_rgba(&run.join("mosaic.png"))?;
    let mut canvas = Canvas::new(1);
    canvas.origin = (meta.origin[0], meta.origin[1]);
    canvas.width = image.width;
    canvas.height = image.height;
    canvas.weight = mask.iter().map(|&m| u16::from(m)).collect();
    canvas.color = image.data;
    Ok(canvas)
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let scene_path = if args.scene.is_dir() { args.scene.join("scene.toml") } else { args.scene.clone() };
    let cfg = SceneConfig::load(&scene_path).with_context(|| format!("reading scene {}", scene_path.display()))?;
    let scene = SyntheticScene::new(cfg)?;
    let trajectory = read_nodes(&args.run.join("nodes.jsonl"))?;
    let canvas = if args.no_mosaic { None } else { Some(read_canvas(&args.run)?) };
    let report = evaluate(&scene, &trajectory, canvas.as_ref());
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = &args.output {
        write_json(path, &report)?;
    }
    Ok(())
}

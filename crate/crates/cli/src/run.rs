//! The `mosaic` command: online tracking and blending of a frame directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::{info, warn};
use nrmosaic::pipeline::ManifestMatches;
use nrmosaic::raster::{load_color, save_color, save_rgba};
use nrmosaic::slam::system::MatchSource;
use nrmosaic::{Config, Pipeline};
use serde::{Deserialize, Serialize};

use crate::frames::list_frames;
use crate::overlay::draw_nodes;
use crate::ConfigArgs;

/// Caps the configured worker count.
pub const WORKERS_ENV: &str = "NRMOSAIC_WORKERS";

#[derive(Args, Debug)]
pub struct MosaicArgs {
    /// Directory of frames; files are ordered by the number in their name.
    pub input: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write every frame with its deformation nodes drawn on top.
    #[arg(long)]
    pub overlay: bool,
    /// Manifest of precomputed matches (`from to file` per line).
    #[arg(long)]
    pub matches: Option<PathBuf>,
}

/// Contents of `mosaic_meta.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct MosaicMeta {
    /// Reference-frame coordinate of the mosaic's top-left pixel.
    pub origin: [i64; 2],
    pub width: usize,
    pub height: usize,
    pub frames_total: usize,
    pub frames_processed: usize,
    pub frames_skipped: usize,
    pub frames_lost: usize,
    pub frames_blended: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub workers: usize,
    pub scale: f64,
    pub nodes: usize,
    pub keyframes: usize,
    pub seconds: f64,
}

fn effective_workers(config: &mut Config) {
    if let Some(cap) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if cap >= 1 && cap < config.workers {
            config.workers = cap;
        }
    }
}

fn jsonl<T: Serialize>(out: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn run(args: &MosaicArgs) -> Result<()> {
    let mut config = args.config.load()?;
    effective_workers(&mut config);
    let frames = list_frames(&args.input)?;
    if frames.is_empty() {
        bail!("no image files in {}", args.input.display());
    }
    let manifest = match &args.matches {
        Some(path) => Some(ManifestMatches::load(path).with_context(|| format!("reading {}", path.display()))?),
        None => None,
    };
    std::fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let overlay_dir = args.output.join("overlay");
    if args.overlay {
        std::fs::create_dir_all(&overlay_dir)?;
    }
    config.save(&args.output.join("config.toml"))?;

    let mut pipeline = Pipeline::new(config)?;
    let mut stats = BufWriter::new(File::create(args.output.join("stats.jsonl"))?);
    let mut nodes = BufWriter::new(File::create(args.output.join("nodes.jsonl"))?);
    let started = std::time::Instant::now();
    let (mut processed, mut skipped, mut lost, mut blended) = (0, 0, 0, 0);
    let mut frame_size = (0, 0);
    for (t, path) in frames.iter().enumerate() {
        let frame = match load_color(path) {
            Ok(f) => f,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let source = manifest.as_ref().map(|m| m as &dyn MatchSource);
        let report = match pipeline.process(t, &frame, source) {
            Ok(r) => r,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        processed += 1;
        frame_size = (frame.width, frame.height);
        lost += usize::from(report.status().is_lost());
        blended += usize::from(report.blended);
        info!("frame {t}: {:?}, {} nodes, {:.1} ms", report.status(), report.step.nodes, report.total_ms);
        jsonl(&mut stats, &report)?;
        jsonl(&mut nodes, &pipeline.nodes_snapshot(t))?;
        if args.overlay {
            let graph = pipeline.graph().expect("initialized after a processed frame");
            save_color(&overlay_dir.join(format!("frame_{t:05}.png")), &draw_nodes(&frame, &graph.nodes))?;
        }
    }
    stats.flush()?;
    nodes.flush()?;
    if processed == 0 {
        bail!("none of the {} frames could be processed", frames.len());
    }

    let rendered = pipeline.canvas().render(true);
    save_rgba(&args.output.join("mosaic.png"), &rendered.image, &rendered.mask)?;
    let graph = pipeline.graph().expect("initialized");
    let meta = MosaicMeta {
        origin: [rendered.origin.0, rendered.origin.1],
        width: rendered.image.width,
        height: rendered.image.height,
        frames_total: frames.len(),
        frames_processed: processed,
        frames_skipped: skipped,
        frames_lost: lost,
        frames_blended: blended,
        frame_width: frame_size.0,
        frame_height: frame_size.1,
        workers: pipeline.workers(),
        scale: pipeline.params().map_or(1.0, |p| p.scale),
        nodes: graph.nodes.len(),
        keyframes: graph.keyframes.len(),
        seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&args.output.join("mosaic_meta.json"), &meta)?;
    eprintln!(
        "{processed}/{} frames processed ({lost} lost, {skipped} skipped), mosaic {}×{} written to {}",
        frames.len(),
        meta.width,
        meta.height,
        args.output.display()
    );
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

//! Command-line front end. Exit codes: 0 success, 1 internal error,
//! 2 usage or validation error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::Rgb;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::eval::{evaluate, EvalError, EvalOptions, MatchRule};
use crate::io::{
    read_detections, read_manifest, read_tile, tracks_to_manifest, write_detections,
    write_manifest, write_tile, IoError, WriteOptions, TILE_SIZE,
};
use crate::linker::{link_series, LinkConfig, LinkError};
use crate::mask::{area, foreground_runs};
use crate::model::{DatasetManifest, Fraction, TrackId};
use crate::synth::{build_synthetic_dataset, SynthConfig, SynthError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "GEOALIGN_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "geoalign",
    version,
    about = "Link, synthesize and evaluate entity tracks across map series"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Worker threads; defaults to the number of cores.
    #[arg(long, env = WORKERS_ENV, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build two-frame pretraining videos from tiles and pseudo-mask files.
    Synth(SynthArgs),
    /// Chain per-frame detections of one map series into tracks.
    Link(LinkArgs),
    /// Score a prediction manifest against ground truth.
    Eval(EvalArgs),
    /// Re-write a manifest or detection file, optionally switching RLE encoding.
    Convert(ConvertArgs),
    /// Summarize a manifest.
    Stats(StatsArgs),
    /// Draw each track in its own color over the frame tiles.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of single-image detection files (*.json).
    #[arg(long)]
    pub detections: PathBuf,
    /// Directory holding the tiles named by the detection files.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit_f64)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = 1)]
    pub min_area: u64,
    /// Per-axis bound in pixels on second-frame offsets.
    #[arg(long, default_value_t = 0)]
    pub max_displacement: u32,
    /// Drop masks lying approximately within a higher-scoring kept mask.
    #[arg(long, value_parser = parse_fraction)]
    pub overlap_suppression: Option<Fraction>,
    /// Write RLE counts as compressed strings.
    #[arg(long)]
    pub compressed: bool,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    /// Detection file with one entry per frame of the series.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "0.6", value_parser = parse_fraction)]
    pub containment_threshold: Fraction,
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit_f64)]
    pub score_threshold: f64,
    /// Frame height when the file declares none and holds no masks.
    #[arg(long, default_value_t = TILE_SIZE)]
    pub height: u32,
    #[arg(long, default_value_t = TILE_SIZE)]
    pub width: u32,
    #[arg(long)]
    pub compressed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IouMatching {
    /// IoU must exceed the threshold.
    Gt,
    /// IoU may equal the threshold.
    Gte,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Structured report output; defaults to the prediction path with
    /// `.eval.json` appended to its stem.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = IouMatching::Gt)]
    pub iou_matching: IouMatching,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub compressed: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory; frames go to `<out>/<video_id>/frame_<t>.png`.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_fraction(s: &str) -> Result<Fraction, String> {
    s.parse::<Fraction>().map_err(|e| e.to_string())
}

fn parse_unit_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} outside [0, 1]"))
    }
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_INTERNAL,
            error,
        }
    }
}

fn io_code(err: &IoError) -> i32 {
    match err {
        IoError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        IoError::Io { .. } => EXIT_INTERNAL,
        IoError::Image { source, .. } => match source {
            image::ImageError::IoError(e) if e.kind() != std::io::ErrorKind::NotFound => {
                EXIT_INTERNAL
            }
            _ => EXIT_USAGE,
        },
        _ => EXIT_USAGE,
    }
}

impl From<IoError> for CliError {
    fn from(err: IoError) -> Self {
        Self {
            code: io_code(&err),
            error: err.into(),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(err: SynthError) -> Self {
        let code = match &err {
            SynthError::Io(e) => io_code(e),
            _ => EXIT_USAGE,
        };
        Self {
            code,
            error: err.into(),
        }
    }
}

impl From<LinkError> for CliError {
    fn from(err: LinkError) -> Self {
        Self::usage(err)
    }
}

impl From<EvalError> for CliError {
    fn from(err: EvalError) -> Self {
        Self::usage(err)
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(anyhow::anyhow!(
            "{what} directory not found: {}",
            path.display()
        )))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(anyhow::anyhow!(
            "{what} file not found: {}",
            path.display()
        )))
    }
}

fn write_options(compressed: bool) -> WriteOptions {
    if compressed {
        WriteOptions::compressed()
    } else {
        WriteOptions::default()
    }
}

fn load_valid_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    Ok(read_manifest(path)?.into_valid()?)
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing normal output to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();

    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            e.code
        }
    }
}

fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n as usize);
    }
    let pool = pool.build().context("building worker pool")?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Link(a) => cmd_link(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Convert(a) => cmd_convert(a, out),
        Command::Stats(a) => cmd_stats(a, out),
        Command::Render(a) => cmd_render(a, out),
    })
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let path = entry.context("listing detection files")?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn cmd_synth(args: &SynthArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    require_dir(&args.detections, "detections")?;
    require_dir(&args.images, "image")?;
    let config = SynthConfig {
        score_threshold: args.score_threshold,
        min_instance_area: args.min_area,
        max_displacement: args.max_displacement,
        overlap_suppression: args.overlap_suppression,
        random_seed: args.seed,
    };
    let files = json_files(&args.detections)?;
    let output = build_synthetic_dataset(&files, &args.images, &config)?;
    write_manifest(&output.manifest, &args.out, write_options(args.compressed))?;
    writeln!(
        out,
        "images in: {}\nexcluded (no kept masks): {}\nvideos out: {}\ntracks: {}",
        output.images_in,
        output.excluded.len(),
        output.videos_out(),
        output.manifest.annotations.len()
    )
    .context("writing summary")?;
    Ok(())
}

pub fn cmd_link(args: &LinkArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    require_file(&args.detections, "detection")?;
    if args.height == 0 || args.width == 0 {
        return Err(CliError::usage(anyhow::anyhow!(
            "frame size must be positive"
        )));
    }
    let config = LinkConfig::new(args.containment_threshold, args.score_threshold)?;
    let file = read_detections(&args.detections)?;
    if file.frames.is_empty() {
        return Err(CliError::usage(anyhow::anyhow!(
            "{}: detection file has no frames",
            args.detections.display()
        )));
    }
    let video = file.video_record((args.height, args.width));
    let tracks = link_series(&file.frames, &video, &config)?;
    let manifest = tracks_to_manifest(video, tracks)?;
    write_manifest(&manifest, &args.out, write_options(args.compressed))?;
    writeln!(out, "tracks: {}", manifest.annotations.len()).context("writing summary")?;
    Ok(())
}

fn default_report_path(pred: &Path) -> PathBuf {
    let stem = pred.file_stem().unwrap_or_default().to_string_lossy();
    pred.with_file_name(format!("{stem}.eval.json"))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    require_file(&args.pred, "prediction manifest")?;
    require_file(&args.gt, "ground-truth manifest")?;
    let pred = load_valid_manifest(&args.pred)?;
    let gt = load_valid_manifest(&args.gt)?;
    let options = EvalOptions {
        f1_rule: match args.iou_matching {
            IouMatching::Gt => MatchRule::Exceeds,
            IouMatching::Gte => MatchRule::AtLeast,
        },
        ..EvalOptions::default()
    };
    let report = evaluate(&pred, &gt, &options)?;
    if !report.scored_predictions {
        log::warn!("predictions carry no scores; AP ranks them as ties");
    }
    let path = args
        .report
        .clone()
        .unwrap_or_else(|| default_report_path(&args.pred));
    std::fs::write(&path, report.to_json())
        .with_context(|| format!("writing {}", path.display()))?;
    write!(out, "{}", report.table()).context("writing table")?;
    writeln!(
        out,
        "tp: {} fp: {} fn: {}",
        report.counts.tp, report.counts.fp, report.counts.fn_
    )
    .context("writing table")?;
    Ok(())
}

pub fn cmd_convert(args: &ConvertArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    require_file(&args.input, "input")?;
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let is_detections = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .is_some_and(|v| v.get("frames").is_some() && v.get("videos").is_none());
    let options = write_options(args.compressed);
    if is_detections {
        let file = read_detections(&args.input)?;
        write_detections(&file, &args.out, options)?;
        writeln!(out, "detection frames: {}", file.frames.len()).context("writing summary")?;
    } else {
        let manifest = load_valid_manifest(&args.input)?;
        write_manifest(&manifest, &args.out, options)?;
        writeln!(
            out,
            "videos: {} annotations: {}",
            manifest.videos.len(),
            manifest.annotations.len()
        )
        .context("writing summary")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub frames: usize,
    pub tracks: usize,
    pub categories: Vec<(u64, String, usize)>,
    pub present_slots: usize,
    pub empty_slots: usize,
    pub mean_track_length: f64,
    pub foreground_pixels: u64,
    pub violations: Vec<String>,
}

pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let present: usize = manifest
        .annotations
        .iter()
        .map(|a| a.present_frames().count())
        .sum();
    let slots: usize = manifest.annotations.iter().map(|a| a.masks.len()).sum();
    DatasetStats {
        videos: manifest.videos.len(),
        frames: manifest.videos.iter().map(|v| v.frame_count).sum(),
        tracks: manifest.annotations.len(),
        categories: manifest
            .categories
            .iter()
            .map(|c| {
                let n = manifest
                    .annotations
                    .iter()
                    .filter(|a| a.category_id == c.id)
                    .count();
                (c.id, c.name.clone(), n)
            })
            .collect(),
        present_slots: present,
        empty_slots: slots - present,
        mean_track_length: if manifest.annotations.is_empty() {
            0.0
        } else {
            present as f64 / manifest.annotations.len() as f64
        },
        foreground_pixels: manifest
            .annotations
            .iter()
            .flat_map(|a| a.masks.iter())
            .map(|m| area(m.as_ref()))
            .sum(),
        violations: manifest
            .validate()
            .iter()
            .map(ToString::to_string)
            .collect(),
    }
}

pub fn cmd_stats(args: &StatsArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    require_file(&args.manifest, "manifest")?;
    let loaded = read_manifest(&args.manifest)?;
    let stats = dataset_stats(&loaded.manifest);
    if args.json {
        let text = serde_json::to_string_pretty(&stats).context("serializing stats")?;
        writeln!(out, "{text}").context("writing stats")?;
    } else {
        let mut text = format!(
            "videos: {}\nframes: {}\ntracks: {}\npresent slots: {}\nempty slots: {}\nmean frames per track: {:.2}\nforeground pixels: {}\n",
            stats.videos,
            stats.frames,
            stats.tracks,
            stats.present_slots,
            stats.empty_slots,
            stats.mean_track_length,
            stats.foreground_pixels
        );
        for (id, name, n) in &stats.categories {
            text.push_str(&format!("category {id} ({name}): {n} tracks\n"));
        }
        text.push_str(&format!("violations: {}\n", stats.violations.len()));
        for v in &stats.violations {
            text.push_str(&format!("  - {v}\n"));
        }
        write!(out, "{text}").context("writing stats")?;
    }
    Ok(())
}

/// Stable overlay color for a track, derived from a hash of its id. Channels
/// stay within 64..=255 so overlays remain visible on dark tiles.
pub fn track_color(track_id: TrackId) -> Rgb<u8> {
    let digest = Sha256::digest(track_id.to_le_bytes());
    Rgb([
        64 + digest[0] % 192,
        64 + digest[1] % 192,
        64 + digest[2] % 192,
    ])
}

pub fn render_frame_path(out_dir: &Path, video_id: u64, frame: usize) -> PathBuf {
    out_dir
        .join(video_id.to_string())
        .join(format!("frame_{frame:02}.png"))
}

pub fn cmd_render(args: &RenderArgs, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    require_file(&args.manifest, "manifest")?;
    require_dir(&args.images, "image")?;
    let manifest = load_valid_manifest(&args.manifest)?;
    let tracks = manifest.tracks_by_video();
    let mut written = 0usize;
    for video in &manifest.videos {
        let video_tracks = tracks.get(&video.video_id).cloned().unwrap_or_default();
        for (t, name) in video.frame_names.iter().enumerate() {
            let tile_path = args.images.join(name);
            let mut img = read_tile(&tile_path)?;
            if img.dimensions() != (video.width, video.height) {
                return Err(CliError::usage(anyhow::anyhow!(
                    "{}: tile is {}x{} but video {} is {}x{}",
                    tile_path.display(),
                    img.height(),
                    img.width(),
                    video.video_id,
                    video.height,
                    video.width
                )));
            }
            for track in &video_tracks {
                let Some(mask) = track.masks.get(t).and_then(Option::as_ref) else {
                    continue;
                };
                let color = track_color(track.track_id);
                let h = u64::from(mask.height());
                for (start, len) in foreground_runs(mask) {
                    for i in start..start + len {
                        img.put_pixel((i / h) as u32, (i % h) as u32, color);
                    }
                }
            }
            write_tile(&img, render_frame_path(&args.out, video.video_id, t))?;
            written += 1;
        }
    }
    writeln!(out, "frames rendered: {written}").context("writing summary")?;
    Ok(())
}

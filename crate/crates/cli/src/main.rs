//! `mvcap`: command-line driver for the capture toolkit.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "HUMMAN_TOOLCHAIN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mvcap", version, about = "Multi-view human capture toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file whose sections override stage defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic capture: rig, noisy 2D detections, ground truth.
    Synth(SynthArgs),
    /// Triangulate 2D detections into 3D keypoints.
    Annotate(AnnotateArgs),
    /// Fit body shape to a scan, then pose to every keypoint frame.
    Register(RegisterArgs),
    /// Refine depth-camera extrinsics from overlapping depth maps.
    Calibrate(CalibrateArgs),
    /// Pair depth-camera frames with phone frames.
    Sync(SyncArgs),
    /// Remove outliers from a point cloud.
    Denoise(DenoiseArgs),
    /// Compare predicted 3D keypoints with ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Also render depth maps of the calibration scene.
    #[arg(long)]
    pub depth: bool,
    /// Depth resolution relative to 640×576.
    #[arg(long, default_value_t = 0.5, requires = "depth")]
    pub depth_scale: f64,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long)]
    pub kp2d: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run the temporal refinement after triangulation.
    #[arg(long, requires = "topology")]
    pub refine: bool,
    /// Bone list used by the refinement.
    #[arg(long)]
    pub topology: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Static scan (OBJ) for the shape stage.
    #[arg(long)]
    pub scan: PathBuf,
    /// 3D keypoints; one entry per model joint unless `--joint-map` is given.
    #[arg(long)]
    pub kp3d: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model asset JSON; the built-in procedural body otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Joint limits JSON; anatomical defaults otherwise.
    #[arg(long)]
    pub limits: Option<PathBuf>,
    /// JSON list giving, for each model joint, a keypoint index or null.
    #[arg(long)]
    pub joint_map: Option<PathBuf>,
    /// Keypoint frame paired with the scan.
    #[arg(long, default_value_t = 0)]
    pub shape_frame: usize,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Rig with the initial extrinsics and depth intrinsics.
    #[arg(long)]
    pub rig: PathBuf,
    /// Directory of `.pf32` depth maps with their JSON sidecars.
    #[arg(long)]
    pub depth_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SkewPreset {
    /// 33 ms, one depth-camera frame.
    Frame,
    /// 16.7 ms, half a phone frame.
    HalfPhone,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("clock").required(true).args(["offset", "round_trip"]))]
pub struct SyncArgs {
    /// Depth-camera timestamps (JSON array of seconds).
    #[arg(long)]
    pub kinect: PathBuf,
    /// Phone timestamps (JSON array of seconds).
    #[arg(long)]
    pub iphone: PathBuf,
    /// Known depth-camera→phone clock offset in seconds.
    #[arg(long, allow_negative_numbers = true)]
    pub offset: Option<f64>,
    /// One request: local send time, remote receive stamp, round trip.
    #[arg(long, num_args = 3, value_names = ["SEND", "RECV", "ROUND"], allow_negative_numbers = true)]
    pub round_trip: Option<Vec<f64>>,
    #[arg(long, value_enum, conflicts_with = "max_skew")]
    pub preset: Option<SkewPreset>,
    /// Rejection threshold in seconds.
    #[arg(long)]
    pub max_skew: Option<f64>,
    /// CSV destination; standard output otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "depth"]))]
pub struct DenoiseArgs {
    /// PLY cloud.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Depth map stem (`<stem>.pf32` + `<stem>.json`), lifted after masking
    /// depth discontinuities.
    #[arg(long, requires = "rig")]
    pub depth: Option<PathBuf>,
    /// Rig holding the depth camera.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Full report with per-frame errors.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How a run failed, mapped onto the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<mvcap_core::pipeline::io::IoError> for Failure {
    fn from(e: mvcap_core::pipeline::io::IoError) -> Self {
        Failure::Data(e.into())
    }
}

fn thread_count() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = thread_count().and_then(|threads| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            pool = pool.num_threads(n);
        }
        let pool = pool.build().map_err(|e| Failure::Usage(format!("cannot start worker pool: {e}")))?;
        pool.install(|| commands::run(&cli))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `mvcap --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

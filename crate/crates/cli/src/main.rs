//! `mbocc`: data generation, warping, cost blocks, training, inference,
//! evaluation, statistics and ablation sweeps from the command line.

mod commands;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mbocc", version, about = "Joint motion-boundary and occlusion detection toolkit")]
struct Cli {
    /// Worker threads for data-parallel kernels (0 = all cores).
    #[arg(long, global = true, env = "MBOCC_THREADS", default_value_t = 0)]
    threads: usize,

    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = "MBOCC_OUT_ROOT")]
    out_root: Option<PathBuf>,

    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render samples with exact ground truth.
    Gen(GenArgs),
    /// Direct or reverse warp of a map along a flow.
    Warp(WarpArgs),
    /// Cost block of two feature maps along a flow.
    Costblock(CostblockArgs),
    /// Train the detector on a dataset.
    Train(TrainArgs),
    /// Predict boundary, occlusion and attention maps.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Boundary/occlusion adjacency statistics.
    Stats(StatsArgs),
    /// Component, decoder-order and task-coupling sweep.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene description (TOML). Mutually exclusive with --random.
    #[arg(long, conflicts_with = "random")]
    pub spec: Option<PathBuf>,
    /// Number of random scenes to render into sample subdirectories.
    #[arg(long)]
    pub random: Option<usize>,
    /// Width of random scenes.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Height of random scenes.
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Maximum shapes per random scene.
    #[arg(long, default_value_t = 3)]
    pub max_shapes: usize,
    /// Maximum per-axis shape translation in pixels.
    #[arg(long, default_value_t = 3)]
    pub max_translation: i32,
    /// Standard deviation of additive frame noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Keep the background static and shapes inside the frame.
    #[arg(long)]
    pub keep_inside: bool,
    /// Random seed (noise for --spec, scenes and noise for --random).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WarpMode {
    /// Splat along the flow (max over collisions, holes undefined).
    Direct,
    /// Bilinear sampling along the flow.
    Reverse,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long, value_enum)]
    pub mode: WarpMode,
    /// Single-channel map to warp.
    #[arg(long)]
    pub map: PathBuf,
    /// Two-channel flow (F_{a->b} for direct, F_{b->a} for reverse).
    #[arg(long)]
    pub flow: PathBuf,
    /// Output map.
    #[arg(long)]
    pub out: PathBuf,
    /// Coverage counts of a direct warp.
    #[arg(long)]
    pub coverage: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostblockArgs {
    /// Features of frame a.
    #[arg(long)]
    pub fa: PathBuf,
    /// Features of frame b.
    #[arg(long)]
    pub fb: PathBuf,
    /// Flow F_{a->b}.
    #[arg(long)]
    pub flow: PathBuf,
    /// Half-width of the search window.
    #[arg(long, default_value_t = mbocc::cost::DEFAULT_RADIUS)]
    pub radius: usize,
    /// Output map.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration with [net] and [train] tables; defaults if absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured number of steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Sample directory or dataset directory.
    #[arg(long)]
    pub pair: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction directory (mirrors the ground-truth layout).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth sample or dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub report: PathBuf,
    /// Directory for precision/recall plots (PNG).
    #[arg(long)]
    pub plots: Option<PathBuf>,
    /// Boundary matching tolerance in pixels (default scales with the image diagonal).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Thresholds in the reported precision/recall sweep.
    #[arg(long, default_value_t = mbocc::eval::DEFAULT_THRESHOLDS)]
    pub thresholds: usize,
    /// Distance bin edges for the stratified tables.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 1e9])]
    pub bins: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Boundary map (with --occ).
    #[arg(long, requires = "occ", conflicts_with = "data")]
    pub mb: Option<PathBuf>,
    /// Occlusion map (with --mb).
    #[arg(long, requires = "mb")]
    pub occ: Option<PathBuf>,
    /// Dataset or sample directory; pools both frames of every sample, with
    /// the occlusions of both frames brought into each frame.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Chebyshev radii.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 3])]
    pub radii: Vec<usize>,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Run configuration: [net] is the base network, [train] the schedule.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; the last --eval-count samples are held out.
    #[arg(long)]
    pub data: PathBuf,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Held-out samples for scoring.
    #[arg(long, default_value_t = 50)]
    pub eval_count: usize,
    /// Train independent runs concurrently.
    #[arg(long)]
    pub parallel: bool,
    /// Restrict to variants whose label contains one of these tags (e.g. full,-DAB).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

static THREADS: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(1);

/// Worker threads in effect.
pub fn threads() -> usize {
    THREADS.load(std::sync::atomic::Ordering::Relaxed)
}

#[cfg(feature = "parallel")]
fn setup_threads(n: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    THREADS.store(rayon::current_num_threads(), std::sync::atomic::Ordering::Relaxed);
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn setup_threads(n: usize) -> anyhow::Result<()> {
    if n > 1 {
        log::warn!("built without the parallel feature; ignoring --threads {n}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    if let Some(root) = &cli.out_root {
        // Output paths are resolved through the environment everywhere.
        std::env::set_var("MBOCC_OUT_ROOT", root);
    }
    let result = setup_threads(cli.threads).and_then(|_| match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Warp(a) => commands::warp(a),
        Command::Costblock(a) => commands::costblock(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Stats(a) => commands::stats(a),
        Command::Ablate(a) => commands::ablate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

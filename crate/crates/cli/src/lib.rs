//! `motionssl` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 when an
//! input file is malformed or the computation rejects the data.

mod commands;
mod config;
mod render;

use std::ffi::OsString;
use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{FileConfig, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] motionssl_core::Error),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(motionssl_core::Error::InvalidConfig(_)) => {
                EXIT_USAGE
            }
            _ => EXIT_DATA,
        }
    }
}

fn with_default(text: &str, value: impl Display) -> String {
    format!("{text} [default: {value}]")
}

fn d_msrm() -> motionssl_core::msrm::MsrmConfig {
    config::defaults().0
}

fn d_ssl() -> motionssl_core::trainer::SslConfig {
    config::defaults().1
}

#[derive(Debug, Parser)]
#[command(name = "motionssl", version, about = "Semi-supervised BEV motion prediction toolkit")]
struct Cli {
    /// TOML file with hyperparameters; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true, help = with_default("Worker threads", 1))]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic labeled, unlabeled and test scenes.
    Synth(SynthArgs),
    /// Turn a CSV point list (frame,x,y,z) into an occupancy sequence.
    Voxelize(VoxelizeArgs),
    /// Score and re-generate pseudo labels against the next frame.
    Refine(RefineArgs),
    /// Apply flip, temporal sampling and BEVMix to one scene.
    Augment(AugmentArgs),
    /// Train a teacher on labeled scenes, then run the mean-teacher loop.
    TrainSsl(TrainArgs),
    /// Report per-speed-bucket endpoint errors.
    Eval(EvalArgs),
    /// Draw motion arrows or a reliability map as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    #[arg(long, help = with_default("Random seed", 0))]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MsrmArgs {
    #[arg(long, help = with_default("Neighbours per unreliable cell (K)", d_msrm().regen.k))]
    k: Option<usize>,
    #[arg(long, help = with_default("Reliability threshold on the label gap, cells (mu)", d_msrm().mu))]
    mu: Option<f64>,
    #[arg(long, help = with_default("Neighbour distance cutoff, cells (beta)", d_msrm().regen.beta))]
    beta: Option<f64>,
    #[arg(long, help = with_default("Consistency threshold (gamma)", d_msrm().regen.gamma))]
    gamma: Option<f64>,
    #[arg(long, help = with_default("Transport cost length scale, cells^2 (theta_c)", d_msrm().matching.theta_c))]
    theta_c: Option<f64>,
    #[arg(long, help = with_default("Neighbour weight length scale, cells (theta_w)", d_msrm().regen.theta_w))]
    theta_w: Option<f64>,
    #[arg(long, help = with_default("Sinkhorn entropic regularization", d_msrm().matching.sinkhorn.epsilon))]
    epsilon: Option<f64>,
    #[arg(long, help = with_default("Sinkhorn iteration budget", d_msrm().matching.sinkhorn.max_iters))]
    sinkhorn_iters: Option<usize>,
    #[arg(long, help = with_default("Drop ground cells before matching", false))]
    exclude_ground: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory; gets labeled/, unlabeled/, test/ and manifest.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, help = with_default("Training scenes", commands::SYNTH_SCENES))]
    scenes: Option<usize>,
    #[arg(long, help = with_default("Test scenes", commands::SYNTH_TEST_SCENES))]
    test_scenes: Option<usize>,
    #[arg(long, help = with_default("Fraction of training scenes written with labels", commands::SYNTH_LABELED_FRAC))]
    labeled_frac: Option<f64>,
    #[arg(long, help = with_default("Objects per scene", motionssl_core::synthworld::SceneConfig::default().n_objects))]
    objects: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct VoxelizeArgs {
    /// CSV with header `frame,x,y,z`; frames are integer indices, 0 = current.
    #[arg(long, value_name = "CSV")]
    input: PathBuf,
    /// Output container.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, help = with_default("Prediction horizon, seconds", 1.0))]
    horizon: Option<f64>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// Container with `occupancy`, `future` and the pseudo motion field.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output container with refined labels and diagnostics.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value = "motion", help = "Name of the pseudo motion array [default: motion]", hide_default_value = true)]
    motion: String,
    #[arg(long, help = with_default("Also store the transport plan", false))]
    dump_plan: bool,
    #[command(flatten)]
    msrm: MsrmArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FlipArg {
    X,
    Y,
    None,
    Random,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Scene container.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output container.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FlipArg::None, help = "Flip axis [default: none]", hide_default_value = true)]
    flip: FlipArg,
    #[arg(long, help = with_default("Stride-2 temporal sampling", false))]
    ts: bool,
    /// Paste this scene's foreground into the input.
    #[arg(long, value_name = "FILE")]
    bevmix: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of labeled scene containers.
    #[arg(long, value_name = "DIR")]
    labeled: PathBuf,
    /// Directory of unlabeled scene containers.
    #[arg(long, value_name = "DIR")]
    unlabeled: Option<PathBuf>,
    /// Held-out scenes evaluated after every epoch.
    #[arg(long, value_name = "DIR")]
    eval: Option<PathBuf>,
    /// Output container for the teacher parameters.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Per-epoch CSV log; defaults to the output path with a .csv extension.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    #[arg(long, help = with_default("Fraction of labeled scenes kept labeled", d_ssl().labeled_fraction))]
    labeled_frac: Option<f64>,
    #[arg(long, help = with_default("Supervised teacher epochs", d_ssl().train.epochs))]
    epochs: Option<usize>,
    #[arg(long, help = with_default("Mean-teacher epochs", d_ssl().ssl_epochs))]
    ssl_epochs: Option<usize>,
    #[arg(long, help = with_default("Batch size", d_ssl().train.batch_size))]
    batch_size: Option<usize>,
    #[arg(long, help = with_default("Adam learning rate", d_ssl().train.adam.lr))]
    lr: Option<f64>,
    #[arg(long, help = with_default("EMA decay (alpha)", d_ssl().alpha))]
    alpha: Option<f64>,
    #[arg(long, help = with_default("Temporal sampling probability", d_ssl().temporal_prob))]
    temporal_prob: Option<f64>,
    #[arg(long, help = with_default("BEVMix probability", d_ssl().bevmix_prob))]
    bevmix_prob: Option<f64>,
    #[arg(long, help = "Optimizer steps per mean-teacher epoch [default: larger pool / batch size]")]
    steps_per_epoch: Option<usize>,
    #[arg(long, num_args = 2, value_delimiter = ',', help = with_default("Hidden channels", "16,16"))]
    hidden: Option<Vec<usize>>,
    #[arg(long, num_args = 3, value_delimiter = ',', help = with_default("Kernel sizes", "3,3,1"))]
    kernels: Option<Vec<usize>>,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    msrm: MsrmArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Container holding a predicted motion field.
    #[arg(long, value_name = "FILE", requires = "gt", conflicts_with_all = ["params", "data"])]
    pred: Option<PathBuf>,
    /// Container holding the ground-truth motion field.
    #[arg(long, value_name = "FILE")]
    gt: Option<PathBuf>,
    /// Trained parameters; predicts every scene in --data.
    #[arg(long, value_name = "FILE", requires = "data")]
    params: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "motion", help = "Motion array name in --pred [default: motion]", hide_default_value = true)]
    pred_name: String,
    #[arg(long, default_value = "motion", help = "Motion array name in --gt [default: motion]", hide_default_value = true)]
    gt_name: String,
    /// Also write the report as CSV.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RenderKind {
    Quiver,
    Reliability,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Container with occupancy, a motion field or a `delta` map.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// SVG output path.
    #[arg(long, value_name = "SVG")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = RenderKind::Quiver, help = "What to draw [default: quiver]", hide_default_value = true)]
    kind: RenderKind,
    /// Motion array to draw; `labels`, then `motion`, when omitted.
    #[arg(long)]
    motion: Option<String>,
    #[arg(long, default_value_t = 8.0, help = "Pixels per cell [default: 8]", hide_default_value = true)]
    scale: f64,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let verbosity = cli.verbose.max(file.verbosity.unwrap_or(0));
    let level = match verbosity {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    let threads = config::pick(cli.threads, file.threads, 1);
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => commands::synth(&a, &file),
        Command::Voxelize(a) => commands::voxelize(&a, &file),
        Command::Refine(a) => commands::refine(&a, &file),
        Command::Augment(a) => commands::augment(&a, &file),
        Command::TrainSsl(a) => commands::train_ssl(&a, &file, threads, verbosity),
        Command::Eval(a) => commands::eval(&a),
        Command::Render(a) => render::render(&a),
    })
}

//! `isoform`: train occupancy fields, extract and sample meshes, evaluate
//! reconstructions and run sampling-strategy ablations.

mod commands;
mod error;
mod fieldspec;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isoform::mesh_refine::{DEFAULT_LAMBDA, DEFAULT_SAMPLES_PER_FACE};
use isoform::metrics::DEFAULT_SAMPLES;
use isoform::mise::{DEFAULT_INITIAL_RESOLUTION, DEFAULT_TAU};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "isoform", version, about = "Occupancy fields to meshes and back")]
struct Cli {
    /// Seed for every random choice; falls back to ISOFORM_SEED, then to the
    /// config file or 0.
    #[arg(long, global = true, env = "ISOFORM_SEED")]
    seed: Option<u64>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON config; writes weights.json, train.csv and
    /// manifest.json into the output directory.
    Train(TrainArgs),
    /// Extract a mesh from trained weights or an analytic field spec.
    Extract(ExtractArgs),
    /// Compare a predicted mesh with a ground truth mesh or field spec.
    Eval(EvalArgs),
    /// Decode latent codes drawn from the prior of a variational model.
    Sample(SampleArgs),
    /// Train and evaluate every (strategy, architecture) cell on a corpus.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory receiving the artifacts.
    #[arg(long)]
    pub out: PathBuf,
    /// Points sampled per shape and step [config default: 2048].
    #[arg(long)]
    pub points: Option<usize>,
    /// Points in each observed cloud [config default: 300].
    #[arg(long)]
    pub cloud_points: Option<usize>,
    /// Standard deviation of the noise added to observed clouds [config default: 0.05].
    #[arg(long)]
    pub cloud_noise: Option<f64>,
    /// Optimizer steps [config default: 5000].
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Extraction {
    /// Occupancy threshold of the surface.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Use the threshold stored in the weights instead of --tau.
    #[arg(long)]
    pub model_tau: bool,
    /// Grid resolution before subdivision.
    #[arg(long, default_value_t = DEFAULT_INITIAL_RESOLUTION)]
    pub initial_res: usize,
    /// Number of subdivision levels.
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    /// Vertex refinement iterations after extraction.
    #[arg(long, default_value_t = 0)]
    pub refine_steps: usize,
    /// Simplify to at most this many faces before refining.
    #[arg(long)]
    pub simplify_to: Option<usize>,
    /// Weight of the normal alignment term during refinement.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Random points per face during refinement.
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_FACE)]
    pub samples_per_face: usize,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Trained weights.
    #[arg(long, conflicts_with = "field", required_unless_present = "field")]
    pub weights: Option<PathBuf>,
    /// Analytic solid, e.g. `sphere:0.5`, `torus:0.35:0.15`, `box`,
    /// `union(sphere:0.3@-0.3:0:0,sphere:0.3@0.3:0:0)`.
    #[arg(long)]
    pub field: Option<String>,
    /// Soften the analytic field over this width (0 keeps it binary).
    #[arg(long, default_value_t = 0.0, requires = "field")]
    pub smooth: f64,
    /// Shape index for latent-table weights.
    #[arg(long, requires = "weights", conflicts_with_all = ["points", "voxels"])]
    pub shape_id: Option<usize>,
    /// Point cloud (vertices of an OFF/OBJ file) for point-cloud weights.
    #[arg(long, requires = "weights", conflicts_with = "voxels")]
    pub points: Option<PathBuf>,
    /// Voxel grid (JSON) for voxel weights.
    #[arg(long, requires = "weights")]
    pub voxels: Option<PathBuf>,
    #[command(flatten)]
    pub extraction: Extraction,
    /// Output mesh (.off or .obj).
    #[arg(long)]
    pub out: PathBuf,
    /// Extraction statistics [default: <out>.stats.json].
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted mesh (.off or .obj).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: a watertight mesh file or a field spec.
    #[arg(long)]
    pub gt: String,
    /// Monte Carlo samples for IoU and surface points per mesh.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub n: usize,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Weights trained with the generative protocol.
    #[arg(long)]
    pub weights: PathBuf,
    /// Number of meshes.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[command(flatten)]
    pub extraction: Extraction,
    /// Directory receiving sample_NNN.<format>.
    #[arg(long)]
    pub out: PathBuf,
    /// Mesh format: off or obj.
    #[arg(long, default_value = "off")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directory of watertight OFF/OBJ meshes, or `desk` for the built-in
    /// analytic corpus.
    #[arg(long)]
    pub corpus: String,
    /// Protocol settings (JSON); built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma separated sampling strategies [default: uniform,equal,surface].
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<String>,
    /// Comma separated architectures [default: full,no_resnet,no_cbn].
    #[arg(long, value_delimiter = ',')]
    pub archs: Vec<String>,
    /// Output table (CSV); per-shape rows go to <out>.rows.json.
    #[arg(long)]
    pub out: PathBuf,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Train(a) => commands::train(&a, cli.seed),
        Command::Extract(a) => commands::extract(&a, cli.seed),
        Command::Eval(a) => commands::eval(&a, cli.seed),
        Command::Sample(a) => commands::sample(&a, cli.seed),
        Command::Ablate(a) => commands::ablate(&a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}

mod commands;
mod failure;
mod image;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Parser)]
#[command(name = "rescalekit", version, about = "Receptive-field adaptation for convolutional denoisers at unseen resolutions")]
struct Cli {
    /// Emit machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a dispersion operator on white-noise calibration patches.
    Disperse(DisperseArgs),
    /// Run DDIM sampling with an adaptation plan and render the latent.
    Sample(SampleArgs),
    /// Run a property suite and report each check.
    Verify(VerifyArgs),
    /// Measure impulse-response footprints of a kernel or of plan layers.
    Erf(ErfArgs),
    /// Evaluate a GroupNorm/conv decoder stack tile by tile.
    Tile(TileArgs),
    /// Write seeded model weights.
    InitWeights(InitArgs),
}

#[derive(Args)]
pub struct DisperseArgs {
    #[arg(long, default_value_t = 3)]
    pub r: usize,
    #[arg(long = "rprime", default_value_t = 5)]
    pub r_prime: usize,
    #[arg(long, default_value_t = 2.0)]
    pub d: f64,
    #[arg(long, default_value_t = rescalekit::dispersion::DEFAULT_ETA)]
    pub eta: f64,
    /// Seed of the calibration patches.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = rescalekit::dispersion::DEFAULT_PATCHES)]
    pub patches: usize,
    #[arg(long, default_value_t = rescalekit::dispersion::DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SampleArgs {
    /// Plan file, or the name of a reference setting such as `sd15-4x`.
    #[arg(long)]
    pub plan: String,
    /// Directory holding operator files named by the plan. Defaults to the plan's directory.
    #[arg(long)]
    pub operators: Option<PathBuf>,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Latent size `WxH`. Defaults to the plan's latent, else the model's sample size.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    /// Override the plan's step count; tau is clamped to it.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also save the raw latent as DTEN.
    #[arg(long)]
    pub latent_out: Option<PathBuf>,
    /// Write per-step PGM diagnostics into this directory.
    #[arg(long)]
    pub dump_steps: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Dispersion,
    Identity,
    Tiling,
    Attention,
    Plans,
    All,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
    /// Random kernels used by the universality check.
    #[arg(long, default_value_t = 100)]
    pub kernels: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ErfArgs {
    /// Kernel size for single-kernel probing.
    #[arg(long, conflicts_with = "plan")]
    pub kernel: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    pub d: f64,
    /// Dispersion operator to include in single-kernel probing.
    #[arg(long)]
    pub operator: Option<PathBuf>,
    /// Probe every adapted layer of this plan (file or reference name).
    #[arg(long)]
    pub plan: Option<String>,
    #[arg(long)]
    pub operators: Option<PathBuf>,
    /// Model weights for plan probing; seeded weights are used when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Denoising step at which plan factors are evaluated.
    #[arg(long, default_value_t = 0)]
    pub step: usize,
    /// Seed for the random kernel or the seeded model.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Side of the square probe.
    #[arg(long, default_value_t = 33)]
    pub extent: usize,
    /// Heatmap PNG.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Args)]
pub struct TileArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub tile: usize,
    #[arg(long, default_value_t = 8)]
    pub overlap: usize,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub sync: Toggle,
    /// Value range mapped onto 0..255, as `lo,hi`.
    #[arg(long, default_value = "-1,1")]
    pub range: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also save the raw output as DTEN.
    #[arg(long)]
    pub tensor_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Unet,
    Decoder,
}

#[derive(Args)]
pub struct InitArgs {
    #[arg(long, value_enum)]
    pub kind: ModelKind,
    #[arg(long)]
    pub seed: u64,
    /// U-Net config JSON; defaults to the built-in toy config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Decoder channel widths, comma separated.
    #[arg(long, default_value = "4,16,16,4")]
    pub channels: String,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// What a command prints: text for people, JSON for scripts.
pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
    /// Verification failed; printed normally but exits with the numerical code.
    pub failed: bool,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("RESCALEKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("RESCALEKIT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<Report, Failure> {
    configure_threads()?;
    match &cli.command {
        Command::Disperse(a) => commands::disperse(a),
        Command::Sample(a) => commands::sample(a),
        Command::Verify(a) => verify::run(a),
        Command::Erf(a) => commands::erf(a),
        Command::Tile(a) => commands::tile(a),
        Command::InitWeights(a) => commands::init_weights(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { failure::CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(report) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report.json).expect("report serializes"));
            } else {
                print!("{}", report.text);
            }
            ExitCode::from(if report.failed { failure::NUMERICAL } else { 0 })
        }
        Err(f) => {
            if cli.json {
                println!("{}", serde_json::json!({ "error": f.message, "code": f.code }));
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

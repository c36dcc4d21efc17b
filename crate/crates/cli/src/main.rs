//! `darkforge` command-line interface.
//!
//! Exit codes: 0 on success, 1 on operational failure (including a failed
//! verification), 2 on usage errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use darkforge::illumination::IlluminanceBand;

#[derive(Parser, Debug)]
#[command(
    name = "darkforge",
    version,
    about = "Extremely-low-light RAW synthesis and enhancement numerics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a noise model from flat and dark SIEDRAW1 frames.
    Calibrate(CalibrateArgs),
    /// Build a paired dataset from a source manifest.
    Synth(SynthArgs),
    /// Recompute per-band KL of a built dataset against band standards.
    Verify(VerifyArgs),
    /// Sample a Gaussian mixture through the diffusion sampler; writes CSV.
    DiffuseDemo(DiffuseArgs),
    /// Evaluate or gradient-check a training loss on tensor files.
    Losses(LossArgs),
    /// PSNR and SSIM over a list of image pairs.
    Metrics(MetricsArgs),
    /// Render a SIEDRAW1 frame to PPM through the fixed ISP.
    Isp(IspArgs),
    /// Write procedural sources, a noise model and band standards for trying the pipeline.
    DemoData(DemoArgs),
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Flat-field frames; grouped by their ISO tag.
    #[arg(long, num_args = 1.., required = true)]
    flats: Vec<PathBuf>,
    /// Dark frames; grouped by their ISO tag.
    #[arg(long, num_args = 1.., required = true)]
    darks: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON `{"pairs": [{"cap", "ref", "id"}]}`; paths resolve against its directory.
    #[arg(long)]
    sources: PathBuf,
    /// Target band (1e-2, 1e-3, 1e-4); repeatable, default all three.
    #[arg(long = "band", value_parser = parse_band)]
    bands: Vec<IlluminanceBand>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise model JSON.
    #[arg(long)]
    noise: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Band standard as `BAND=PATH`; repeatable.
    #[arg(long = "standard")]
    standard: Vec<String>,
    /// Directory holding `<band>.siedraw` standards.
    #[arg(long, conflicts_with = "standard")]
    standards: Option<PathBuf>,
    /// Centered crop `WxH`, both even.
    #[arg(long, default_value = "3840x2160", value_parser = parse_crop)]
    crop: (u32, u32),
    #[arg(long, default_value_t = darkforge::illumination::DEFAULT_BINS)]
    bins: usize,
    /// White-balance gains `R,G,B`.
    #[arg(long, default_value = "1,1,1", value_parser = parse_gains)]
    wb: [f32; 3],
    /// Add dark-frame residuals from the model's bank.
    #[arg(long)]
    dark_bank: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<band>.siedraw`; defaults to the standards recorded in the manifest.
    #[arg(long)]
    standards: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Include per-entry histograms in the JSON report (printed to stdout without --json).
    #[arg(long)]
    dump_histograms: bool,
    #[arg(long, default_value_t = darkforge::illumination::DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value = "1,1,1", value_parser = parse_gains)]
    wb: [f32; 3],
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sampler {
    Ddim,
    Ancestral,
}

#[derive(Args, Debug)]
struct DiffuseArgs {
    /// Mixture JSON `{"weights", "means", "covariances"}`; a built-in 2-D pair otherwise.
    #[arg(long)]
    gmm: Option<PathBuf>,
    /// Training steps of the linear schedule.
    #[arg(long = "T", default_value_t = darkforge::diffusion::DEFAULT_TRAIN_STEPS)]
    train_steps: usize,
    #[arg(long, default_value_t = darkforge::diffusion::DEFAULT_SAMPLING_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = Sampler::Ddim)]
    sampler: Sampler,
    /// CSV destination; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossName {
    Icl,
    Ccl,
    Cdl,
    Con,
}

#[derive(Args, Debug)]
struct LossArgs {
    #[arg(long, value_enum)]
    loss: LossName,
    /// Tensor JSON files `{"shape", "data"}`: icl takes F̂ F̃ F_raw, ccl F̂ F, cdl x̂0 x0,
    /// con any number of (input, reconstruction) pairs.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Compare the analytic gradient with central differences.
    #[arg(long)]
    gradcheck: bool,
    #[arg(long, default_value_t = darkforge::enhance::GRADCHECK_STEP)]
    step: f64,
    #[arg(long, default_value_t = darkforge::enhance::GRADCHECK_COORDS)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = darkforge::enhance::HISTOGRAM_BINS)]
    bins: usize,
    /// Kernel bandwidth; a quarter bin width by default.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, default_value_t = darkforge::enhance::CCL_TAU)]
    tau: f64,
    /// Write the gradient tensor as JSON.
    #[arg(long)]
    grad_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Window {
    Gaussian,
    Block8,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// JSON list `[{"name", "output", "reference"}]` of PPM paths, relative to the list.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_enum, default_value_t = Window::Gaussian)]
    window: Window,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Report destination; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IspArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, default_value = "1,1,1", value_parser = parse_gains)]
    wb: [f32; 3],
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    count: usize,
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long, default_value_t = 384)]
    height: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_band(s: &str) -> Result<IlluminanceBand, String> {
    s.parse()
        .map_err(|e: darkforge::illumination::IlluminationError| e.to_string())
}

fn parse_crop(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn parse_gains(s: &str) -> Result<[f32; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [r, g, b] = parts[..] else {
        return Err(format!("expected R,G,B, got {s:?}"));
    };
    let parse = |v: &str| v.trim().parse::<f32>().map_err(|e| format!("{v:?}: {e}"));
    Ok([parse(r)?, parse(g)?, parse(b)?])
}

/// Error split by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Op(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Op(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = darkforge::synth::env_threads() {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("darkforge: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Verify(a) => commands::verify(a),
        Command::DiffuseDemo(a) => commands::diffuse_demo(a),
        Command::Losses(a) => commands::losses(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Isp(a) => commands::isp(a),
        Command::DemoData(a) => commands::demo_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("darkforge: {msg}");
            eprintln!("see `darkforge --help`");
            ExitCode::from(2)
        }
        Err(Failure::Op(e)) => {
            eprintln!("darkforge: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 runtime.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use clap::{Args, Parser, Subcommand};
use exemplar_inpaint::config::Config;
use exemplar_inpaint::data;
use exemplar_inpaint::evaluation::{self, EvalOptions, FeatureExtractor, MaskBin};
use exemplar_inpaint::inference::{self, InferenceOptions};
use exemplar_inpaint::masks::{self, BinaryMask, BrushParams};
use exemplar_inpaint::styles::MixSelector;
use exemplar_inpaint::training::{self, Model, RunDir, TrainState, DTYPE};
use exemplar_inpaint::{checkpoint, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "exinpaint", version, about = "Exemplar-guided face inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, or resume a run.
    Train(TrainArgs),
    /// Inpaint one image.
    Infer(InferArgs),
    /// Run the binned FID / U-IDS / P-IDS protocol on the held-out split.
    Evaluate(EvaluateArgs),
    /// Write sample masks as PNG files.
    MaskGen(MaskGenArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
    /// Print a configuration preset.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long, default_value = "run")]
    pub run_dir: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Override a configuration key (`--set train.batch_size=4`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Log losses every N steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Grayscale PNG, white = region to fill.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub exemplar: PathBuf,
    /// Second exemplar, supplying style layers `--range`.
    #[arg(long, requires = "range")]
    pub exemplar2: Option<PathBuf>,
    /// Crossover layers `I,J` (1-based, inclusive) taken from the second exemplar.
    #[arg(long, value_parser = parse_range, requires = "exemplar2")]
    pub range: Option<(usize, usize)>,
    /// Layer selector such as `1111111000`; defaults to the training selector.
    #[arg(long)]
    pub phi: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub psi: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Resample inputs to the model resolution instead of failing.
    #[arg(long)]
    pub resize: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Images per bin.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskGenArgs {
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `free` (training masks), `center`, or a ratio bin such as `0.3-0.4`.
    #[arg(long, default_value = "free")]
    pub kind: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `default` or `toy`.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (i, j) = s.split_once(',').ok_or("expected I,J")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(i)?, p(j)?))
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::MaskGen(a) => mask_gen(a),
        Command::Serve(a) => serve(a),
        Command::Config(a) => print_config(a),
    }
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut config = Config::load(&a.config)?;
    config.apply_overrides(&a.overrides)?;
    config.validate()?;
    let run = RunDir::new(&a.run_dir);
    let data = training::load_dataset(&config, false)?;
    let every = a.log_every.max(1);
    let log = |r: &training::StepReport| {
        if r.step.is_multiple_of(every) {
            log::info!("step {}: g_total {:.4} d_adv {:.4}", r.step, r.g_total, r.d_adv);
        }
    };
    let state = if a.resume {
        if !run.latest().exists() {
            return Err(CliError::Runtime(format!("no checkpoint to resume in {}", a.run_dir.display())));
        }
        let mut state = checkpoint::load(run.latest())?;
        log::info!("resuming at step {}", state.step);
        training::train_until(&mut state, &data, config.train.total_steps, Some(&run), log)?;
        state
    } else {
        let model = Model::initialize(&config, &data)?;
        let mut state = TrainState::new(model, data.len());
        std::fs::create_dir_all(&run.dir)?;
        checkpoint::save(&state, run.checkpoint(0))?;
        training::train_until(&mut state, &data, config.train.total_steps, Some(&run), log)?;
        state
    };
    println!("trained to step {}; checkpoint {}", state.step, run.latest().display());
    Ok(())
}

fn read_rgb(path: &Path, side: usize, resize: bool) -> Result<Tensor, CliError> {
    let img = image::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let rgb = if img.width() as usize == side && img.height() as usize == side {
        img.to_rgb8()
    } else if resize {
        data::prepare(&img, side)
    } else {
        return Err(CliError::Usage(format!(
            "{} is {}x{}, the model expects {side}x{side} (pass --resize to resample)",
            path.display(),
            img.width(),
            img.height()
        )));
    };
    Tensor::from_vec(data::image_to_chw(&rgb), (1, 3, side, side), &Device::Cpu)
        .and_then(|t| t.to_dtype(DTYPE))
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn read_mask(path: &Path, side: usize, resize: bool) -> Result<Tensor, CliError> {
    let mut m = BinaryMask::load_png(path)?;
    if (m.height(), m.width()) != (side, side) {
        if !resize {
            return Err(CliError::Usage(format!(
                "mask {} is {}x{}, expected {side}x{side}",
                path.display(),
                m.width(),
                m.height()
            )));
        }
        let img =
            image::GrayImage::from_raw(m.width() as u32, m.height() as u32, m.data().iter().map(|v| v * 255).collect())
                .ok_or_else(|| CliError::Runtime("mask buffer size mismatch".into()))?;
        let small = image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Nearest);
        m = BinaryMask::from_vec(side, side, small.into_raw().into_iter().map(|v| (v >= 128) as u8).collect())?;
    }
    Ok(m.to_tensor(DTYPE, &Device::Cpu)?)
}

fn infer(a: InferArgs) -> Result<(), CliError> {
    let model = checkpoint::load_model(&a.checkpoint)?;
    let side = model.config.model.resolution;
    let layers = model.config.model.num_layers();
    let phi = match &a.phi {
        Some(s) => s.parse::<MixSelector>().map_err(|e| CliError::Usage(format!("--phi: {e}")))?,
        None => model.config.train.phi.clone(),
    };
    if phi.len() != layers {
        return Err(CliError::Usage(format!("--phi needs {layers} entries, got {}", phi.len())));
    }
    if !(0.0..=1.0).contains(&a.psi) {
        return Err(CliError::Usage(format!("--psi must lie in [0, 1], got {}", a.psi)));
    }
    if let Some((i, j)) = a.range {
        if !(1 <= i && i <= j && j <= layers) {
            return Err(CliError::Usage(format!("--range needs 1 <= I <= J <= {layers}, got {i},{j}")));
        }
    }
    let image = read_rgb(&a.input, side, a.resize)?;
    let mask = read_mask(&a.mask, side, a.resize)?;
    let exemplar = read_rgb(&a.exemplar, side, a.resize)?;
    let opts = InferenceOptions { phi, psi: a.psi, seed: a.seed };
    let out = match (&a.exemplar2, a.range) {
        (Some(p), Some(range)) => {
            let e2 = read_rgb(p, side, a.resize)?;
            inference::inpaint_mix(&model, &image, &mask, &exemplar, &e2, range, &opts)?
        }
        _ => inference::inpaint(&model, &image, &mask, &exemplar, &opts)?,
    };
    let chw = exemplar_inpaint::ops::to_vec_f32(&out)?;
    std::fs::write(&a.output, data::encode_png(&chw, side)?)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let model = checkpoint::load_model(&a.checkpoint)?;
    let data = training::load_dataset(&model.config, true)?;
    let side = model.config.model.resolution;
    let extractor = FeatureExtractor::desk(side)?;
    let opts = EvalOptions { batch_size: a.batch.max(1), seed: a.seed, brush: BrushParams::scaled_to(side) };
    let report = evaluation::evaluate(&model, &data, &extractor, &evaluation::default_bins(), a.samples, &opts)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = a.output {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn parse_kind(kind: &str) -> Result<Option<MaskBin>, CliError> {
    match kind {
        "free" => Ok(None),
        "center" => Ok(Some(MaskBin::Center)),
        other => {
            let (lo, hi) =
                other.split_once('-').ok_or_else(|| CliError::Usage(format!("unknown mask kind {other:?}")))?;
            let p = |v: &str| v.parse::<f64>().map_err(|_| CliError::Usage(format!("bad ratio {v:?}")));
            let (lo, hi) = (p(lo)?, p(hi)?);
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(CliError::Usage(format!("ratio bin must satisfy 0 <= lo < hi <= 1, got {lo}-{hi}")));
            }
            Ok(Some(MaskBin::Ratio { lo, hi }))
        }
    }
}

fn mask_gen(a: MaskGenArgs) -> Result<(), CliError> {
    let kind = parse_kind(&a.kind)?;
    if a.resolution < 8 {
        return Err(CliError::Usage("--resolution must be at least 8".into()));
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let brush = BrushParams::scaled_to(a.resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for i in 0..a.count {
        let m = match kind {
            None => masks::sample_freeform(&mut rng, a.resolution, a.resolution, &brush)?,
            Some(bin) => bin.sample(&mut rng, a.resolution, &brush)?,
        };
        m.save_png(a.out_dir.join(format!("mask_{i:05}.png")))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let state = server::AppState::load(&a.checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(Arc::new(state), &a.bind)).map_err(|e| CliError::Runtime(e.to_string()))
}

fn print_config(a: ConfigArgs) -> Result<(), CliError> {
    let cfg = match a.preset.as_str() {
        "toy" => Config::toy(a.resolution),
        "default" => {
            let mut c = Config::default();
            c.set("model.resolution", &a.resolution.to_string())?;
            c
        }
        other => return Err(CliError::Usage(format!("unknown preset {other:?}"))),
    };
    cfg.validate()?;
    print!("{}", cfg.to_text());
    Ok(())
}

//! Command-line surface. Every command is a thin wrapper over library operations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::compute_metrics;
use crate::pipeline::{inpaint_video, InferenceConfig, InferenceModel, InpaintOutput, PriorSpec};
use crate::planner;
use crate::prior::builtin_prior;
use crate::train::{
    generate_mask_sequence, static_scene, synthetic_video, train_codec, CodecTrainConfig, MaskGenConfig, TrainConfig,
    TrainLog, Trainer,
};
use crate::video::{load_frames, load_masks, save_frames, save_masks, MaskSequence, VideoFrames};

/// Environment variable that overrides the seed of a config file.
pub const SEED_ENV: &str = "DIFFUERASER_SEED";

#[derive(Debug, Parser)]
#[command(name = "diffueraser", version, about = "Diffusion-based video inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inpaint a frame directory.
    Inpaint(InpaintArgs),
    /// Run one training stage on a dataset directory.
    Train(TrainArgs),
    /// Print the temporal plan as JSON.
    Plan(PlanArgs),
    /// Score inpainted frames against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic dataset of frames and masks.
    MakeDataset(MakeDatasetArgs),
    /// Builtin propagation prior, usable as an external prior command.
    #[command(hide = true)]
    Prior(PriorArgs),
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Required unless --bypass-diffusion is set.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON InferenceConfig; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prior_strength: Option<f64>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub guidance_enabled: Option<bool>,
    #[arg(long)]
    pub bypass_diffusion: bool,
    /// External prior command, called as `<cmd> --frames D --masks D --out D`.
    #[arg(long)]
    pub prior_command: Option<String>,
    #[arg(long)]
    pub refine_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub history: Option<usize>,
    /// Ground-truth frames; enables the evaluation report.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Report path, default `<out>/report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `<video>/frames` and `<video>/masks` subdirectories.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Starting checkpoint; a fresh model with a pretrained codec otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// JSON TrainConfig; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub stage: Option<u8>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub clip_frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Codec pretraining steps for a fresh model.
    #[arg(long, default_value_t = 1500)]
    pub codec_steps: usize,
    /// CSV log, default `<out>.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub n_frames: usize,
    #[arg(long, default_value_t = 22)]
    pub clip_len: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub guidance_enabled: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub runtime_seconds: f64,
    /// Report path; stdout otherwise.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub videos: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Static scenes with this per-frame sensor noise instead of moving content.
    #[arg(long)]
    pub static_noise: Option<f64>,
    /// Mask area fraction; random per video otherwise.
    #[arg(long)]
    pub mask_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Seed from [`SEED_ENV`], if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Config file (or defaults), then the seed variable, then explicit flags.
pub fn inference_config(args: &InpaintArgs) -> Result<InferenceConfig> {
    let mut cfg: InferenceConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => InferenceConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    macro_rules! set {
        ($($field:ident).+ = $value:expr) => {
            if let Some(v) = $value {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(clip_len = args.clip_len);
    set!(steps = args.steps);
    set!(seed = args.seed);
    set!(prior_strength = args.prior_strength);
    set!(blur_sigma = args.blur_sigma);
    set!(guidance_enabled = args.guidance_enabled);
    set!(inversion.refine_iters = args.refine_iters);
    set!(inversion.tol = args.tol);
    set!(inversion.history = args.history);
    if args.bypass_diffusion {
        cfg.bypass_diffusion = true;
    }
    if let Some(command) = &args.prior_command {
        cfg.prior = PriorSpec::External { command: command.clone() };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint into an inference model.
pub fn load_inference_model(path: &Path) -> Result<InferenceModel> {
    let mut model = Model::load(path, DType::F32)?;
    Ok(InferenceModel {
        net: Box::new(model.denoiser(&[])?),
        codec: model.codec(false)?,
        schedule: model.schedule()?,
    })
}

pub fn cmd_inpaint(args: &InpaintArgs) -> Result<InpaintOutput> {
    let cfg = inference_config(args)?;
    let model = match &args.checkpoint {
        Some(p) => load_inference_model(p)?,
        None if cfg.bypass_diffusion => InferenceModel::prior_only()?,
        None => return Err(Error::config("--checkpoint is required unless --bypass-diffusion is set")),
    };
    let frames = load_frames(&args.frames)?;
    let masks = load_masks(&args.masks, frames.n_frames())?;
    let out = inpaint_video(&frames, &masks, &model, &cfg)?;
    save_frames(&out.frames, &args.out)?;
    if let (Some(p), Some(plan)) = (&args.plan_out, &out.plan) {
        write_json(p, plan)?;
    }
    if let Some(gt) = &args.ground_truth {
        let gt = load_frames(gt)?;
        let report = compute_metrics(&out.frames, &gt, &masks, out.runtime_seconds)?;
        let path = args.report.clone().unwrap_or_else(|| args.out.join("report.json"));
        write_json(&path, &report)?;
    }
    Ok(out)
}

/// Every `<video>/frames` + `<video>/masks` pair under `dir`, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(VideoFrames, MaskSequence)>> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    subdirs
        .iter()
        .map(|d| {
            let frames = load_frames(d.join("frames"))?;
            let masks = load_masks(d.join("masks"), frames.n_frames())?;
            Ok((frames, masks))
        })
        .collect()
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(v) = args.stage {
        cfg.stage = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.n_steps {
        cfg.n_steps = v;
    }
    if let Some(v) = args.clip_frames {
        cfg.clip_frames = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<Vec<f64>> {
    let cfg = train_config(args)?;
    let data = load_dataset(&args.dataset)?;
    let model = match &args.init {
        Some(p) => Model::load(p, DType::F32)?,
        None => {
            let mut model = Model::init(ModelConfig::default(), DType::F32, cfg.seed)?;
            if args.codec_steps > 0 {
                let videos: Vec<VideoFrames> = data.iter().map(|(v, _)| v.clone()).collect();
                let codec_cfg = CodecTrainConfig {
                    steps: args.codec_steps,
                    seed: cfg.seed,
                    ..Default::default()
                };
                train_codec(&mut model, &videos, &codec_cfg)?;
            }
            model
        }
    };
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut log = TrainLog::create(&log_path)?;
    let mut trainer = Trainer::new(model, cfg)?;
    let losses = trainer.fit(&data, &mut |step, loss, lr| {
        log::info!("step {step} loss {loss:.6}");
        log.record(step, loss, lr)
    })?;
    log.flush()?;
    trainer.model().save(&args.out)?;
    Ok(losses)
}

pub fn cmd_plan(args: &PlanArgs) -> Result<String> {
    if args.n_frames == 0 || args.clip_len == 0 || args.steps == 0 {
        return Err(Error::config("n_frames, clip_len and steps must be >= 1"));
    }
    planner::build_plan(args.n_frames, args.clip_len, args.steps, args.guidance_enabled)?.to_json()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let out = load_frames(&args.output)?;
    let gt = load_frames(&args.ground_truth)?;
    let masks = load_masks(&args.masks, out.n_frames())?;
    let report = compute_metrics(&out, &gt, &masks, args.runtime_seconds)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    Ok(json)
}

pub fn cmd_make_dataset(args: &MakeDatasetArgs) -> Result<()> {
    let seed = env_seed()?.unwrap_or(args.seed);
    if args.videos == 0 || args.frames == 0 || args.height == 0 || args.width == 0 {
        return Err(Error::config("videos, frames, height and width must be >= 1"));
    }
    for k in 0..args.videos {
        let s = seed.wrapping_add(k as u64);
        let video = match args.static_noise {
            Some(noise) => static_scene(args.height, args.width, args.frames, noise, s)?,
            None => synthetic_video(args.height, args.width, args.frames, s)?,
        };
        let mut mask_cfg = MaskGenConfig::random(s);
        if let Some(rate) = args.mask_rate {
            mask_cfg.rate = rate;
        }
        let masks = generate_mask_sequence(args.height, args.width, args.frames, &mask_cfg)?;
        let dir = args.out.join(format!("video_{k:03}"));
        save_frames(&video, dir.join("frames"))?;
        save_masks(&masks, (args.height, args.width), dir.join("masks"))?;
    }
    Ok(())
}

pub fn cmd_prior(args: &PriorArgs) -> Result<()> {
    let frames = load_frames(&args.frames)?;
    let masks = load_masks(&args.masks, frames.n_frames())?;
    save_frames(&builtin_prior(&frames, &masks)?.frames, &args.out)
}

/// Runs a parsed command, printing what it prints to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Inpaint(a) => cmd_inpaint(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Plan(a) => print_stdout(&cmd_plan(a)?),
        Command::Eval(a) => {
            let json = cmd_eval(a)?;
            if a.report.is_none() {
                print_stdout(&json)?;
            }
            Ok(())
        }
        Command::MakeDataset(a) => cmd_make_dataset(a),
        Command::Prior(a) => cmd_prior(a),
    }
}

/// Prints a line, treating a closed pipe as success.
fn print_stdout(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Process exit code for a result: 0 success, 2 usage or config error, 1 otherwise.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

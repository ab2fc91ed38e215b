//! End-to-end inpainting: prior, inversion, pre-inference, staggered clip
//! denoising with anchor replacement, decoding and blended compositing.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Codec, LatentVideo};
use crate::error::{Error, Result, StageExt};
use crate::network::{Denoiser, TemporalMode};
use crate::planner::{self, ClipSpan, TemporalPlan};
use crate::prior::{self, PriorResult};
use crate::scheduler::{InversionOptions, NoiseSchedule};
use crate::video::{self, check_aligned, MaskSequence, VideoFrames};

/// Which prior fills the holes before diffusion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Builtin,
    External { command: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub clip_len: usize,
    pub steps: usize,
    pub seed: u64,
    pub prior_strength: f64,
    pub blur_sigma: f64,
    pub guidance_enabled: bool,
    pub bypass_diffusion: bool,
    pub inversion: InversionOptions,
    pub prior: PriorSpec,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            clip_len: 22,
            steps: 50,
            seed: 0,
            prior_strength: 1.0,
            blur_sigma: 2.0,
            guidance_enabled: true,
            bypass_diffusion: false,
            inversion: InversionOptions {
                refine_iters: 30,
                tol: 1e-5,
                history: 5,
            },
            prior: PriorSpec::Builtin,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::config("clip_len must be >= 1"));
        }
        if self.steps == 0 && !self.bypass_diffusion {
            return Err(Error::config("steps must be >= 1 unless bypass_diffusion is set"));
        }
        if !(0.0..=1.0).contains(&self.prior_strength) {
            return Err(Error::config(format!(
                "prior_strength {} outside [0, 1]",
                self.prior_strength
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::config("blur_sigma must be a finite value >= 0"));
        }
        if !(self.inversion.tol > 0.0) || self.inversion.history == 0 {
            return Err(Error::config("inversion needs tol > 0 and history >= 1"));
        }
        Ok(())
    }
}

/// Per-frame branch inputs that do not depend on the noise level.
#[derive(Debug, Clone)]
pub struct BranchInputs {
    /// Latent of the masked frames, `[f, 4, h/4, w/4]`.
    pub masked_latent: Tensor,
    /// Pooled masks, `[f, 1, h/4, w/4]`.
    pub mask_small: Tensor,
}

impl BranchInputs {
    pub fn new(frames: &VideoFrames, masks: &MaskSequence, codec: &Codec) -> Result<Self> {
        check_aligned(frames, masks)?;
        Ok(Self {
            masked_latent: codec.encode(&frames.masked(masks)?)?.into_tensor(),
            mask_small: codec::downsample_mask(masks, codec.dtype())?,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.masked_latent.dims().first().copied().unwrap_or(0)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            self.masked_latent.device(),
        )?;
        Ok(Self {
            masked_latent: self.masked_latent.index_select(&idx, 0)?,
            mask_small: self.mask_small.index_select(&idx, 0)?,
        })
    }

    pub fn span(&self, span: ClipSpan) -> Result<Self> {
        Ok(Self {
            masked_latent: self.masked_latent.narrow(0, span.start, span.len())?,
            mask_small: self.mask_small.narrow(0, span.start, span.len())?,
        })
    }
}

/// A noise predictor over one clip of latents at a shared timestep.
pub trait ClipModel {
    fn predict_clip(&self, noisy: &Tensor, t: usize, branch: &BranchInputs) -> Result<Tensor>;
}

impl<F> ClipModel for F
where
    F: Fn(&Tensor, usize, &BranchInputs) -> Result<Tensor>,
{
    fn predict_clip(&self, noisy: &Tensor, t: usize, branch: &BranchInputs) -> Result<Tensor> {
        self(noisy, t, branch)
    }
}

impl ClipModel for Denoiser {
    fn predict_clip(&self, noisy: &Tensor, t: usize, branch: &BranchInputs) -> Result<Tensor> {
        let noisy_latent = LatentVideo::new(noisy.clone())?;
        let masked = LatentVideo::new(branch.masked_latent.to_dtype(noisy.dtype())?)?;
        let cond = codec::assemble_condition(&masked, &branch.mask_small, &noisy_latent)?;
        let feats = self.brushnet_forward(cond.data(), &[t])?;
        self.forward(noisy, &[t], Some(&feats), TemporalMode::Enabled)
    }
}

/// Everything inference needs from a checkpoint.
pub struct InferenceModel {
    pub net: Box<dyn ClipModel>,
    pub codec: Codec,
    pub schedule: NoiseSchedule,
}

impl InferenceModel {
    /// A model without a denoiser, sufficient for bypass mode.
    pub fn prior_only() -> Result<Self> {
        let net = |_: &Tensor, _: usize, _: &BranchInputs| -> Result<Tensor> { Err(Error::invalid("no denoiser loaded")) };
        Ok(Self {
            net: Box::new(net),
            codec: Codec::lossless(candle_core::DType::F32),
            schedule: NoiseSchedule::new(Default::default())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    PreInference,
    Main,
}

/// One denoiser call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub pass: Pass,
    pub position: usize,
    pub timestep: usize,
    /// Frame indices of the clip, in the pass's own numbering.
    pub span: ClipSpan,
    pub anchors: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct InpaintOutput {
    pub frames: VideoFrames,
    pub prior: PriorResult,
    /// `None` in bypass mode.
    pub plan: Option<TemporalPlan>,
    pub trace: Vec<TraceEvent>,
    pub runtime_seconds: f64,
}

/// One noise prediction and one DDIM step for a whole clip.
pub fn denoise_clip(
    model: &dyn ClipModel,
    schedule: &NoiseSchedule,
    latents: &Tensor,
    t: usize,
    prev: Option<usize>,
    branch: &BranchInputs,
    clip_len: usize,
) -> Result<Tensor> {
    let f = latents.dim(0)?;
    if f > clip_len {
        return Err(Error::invalid(format!("clip of {f} frames exceeds clip_len {clip_len}")));
    }
    let eps = model.predict_clip(latents, t, branch)?;
    if eps.dims() != latents.dims() {
        return Err(Error::shape(format!(
            "model returned {:?} for latents {:?}",
            eps.dims(),
            latents.dims()
        )));
    }
    schedule.ddim_step(latents, &eps, t, prev)
}

/// Overwrites the rows of `clip` (covering `span`) that belong to `anchors`.
pub fn apply_anchors(
    clip: &Tensor,
    span: ClipSpan,
    anchors: &[usize],
    anchor_latents: &BTreeMap<usize, Tensor>,
) -> Result<Tensor> {
    if anchors.is_empty() {
        return Ok(clip.clone());
    }
    if clip.dim(0)? != span.len() {
        return Err(Error::shape(format!(
            "clip has {} frames, span {:?} has {}",
            clip.dim(0)?,
            span,
            span.len()
        )));
    }
    let mut rows: Vec<Tensor> = (0..span.len())
        .map(|k| clip.narrow(0, k, 1))
        .collect::<candle_core::Result<_>>()?;
    for &a in anchors {
        if !span.contains(a) {
            return Err(Error::invalid(format!("anchor {a} outside span {span:?}")));
        }
        let z = anchor_latents.get(&a).ok_or(Error::MissingAnchor(a))?;
        let z = z.reshape(rows[a - span.start].dims())?.to_dtype(clip.dtype())?;
        rows[a - span.start] = z;
    }
    Ok(Tensor::cat(&rows, 0)?)
}

/// Anchor latents per denoising position, keyed by frame index.
type AnchorTrajectory = Vec<BTreeMap<usize, Tensor>>;

fn split_frames(x: &Tensor) -> Result<Vec<Tensor>> {
    Ok((0..x.dim(0)?)
        .map(|k| x.narrow(0, k, 1))
        .collect::<candle_core::Result<_>>()?)
}

fn gather(buf: &[Tensor], span: ClipSpan) -> Result<Tensor> {
    Ok(Tensor::cat(&buf[span.frames()], 0)?)
}

fn scatter(buf: &mut [Tensor], span: ClipSpan, clip: &Tensor) -> Result<()> {
    for (k, row) in split_frames(clip)?.into_iter().enumerate() {
        buf[span.start + k] = row;
    }
    Ok(())
}

/// Inverts `x0` position by position along `plan`'s partitions, pinning anchors.
///
/// Returns the latent buffer at the largest inference timestep.
fn invert_along_plan(
    model: &dyn ClipModel,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    partitions: &[Vec<ClipSpan>],
    anchor_sets: &[Vec<Vec<usize>>],
    anchors: &AnchorTrajectory,
    branch: &BranchInputs,
    opts: &InversionOptions,
) -> Result<Tensor> {
    let mut buf = split_frames(x0)?;
    let steps = schedule.timesteps().len();
    for i in (0..steps).rev() {
        let t = schedule.timesteps()[i];
        let prev = schedule.prev_timestep(i);
        for (j, &span) in partitions[i].iter().enumerate() {
            let set = &anchor_sets[i][j];
            let x_prev = gather(&buf, span)?;
            let clip_branch = branch.span(span)?;
            let (x_t, report) = schedule.invert_step(
                &x_prev,
                prev,
                t,
                |cand| {
                    let pinned = apply_anchors(cand, span, set, &anchors[i])?;
                    model.predict_clip(&pinned, t, &clip_branch)
                },
                opts,
            )?;
            log::debug!(
                "invert t={t} span={}..{} iterations={} residual={:.3e}",
                span.start,
                span.end,
                report.iterations,
                report.residual
            );
            scatter(&mut buf, span, &apply_anchors(&x_t, span, set, &anchors[i])?)?;
        }
    }
    Ok(Tensor::cat(&buf, 0)?)
}

/// Denoises the buffer along `plan`'s partitions, replacing anchors before each call.
#[allow(clippy::too_many_arguments)]
fn denoise_along_plan(
    model: &dyn ClipModel,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    partitions: &[Vec<ClipSpan>],
    anchor_sets: &[Vec<Vec<usize>>],
    anchors: &AnchorTrajectory,
    branch: &BranchInputs,
    clip_len: usize,
    pass: Pass,
    trace: &mut Vec<TraceEvent>,
) -> Result<Tensor> {
    let mut buf = split_frames(x_t)?;
    for (i, &t) in schedule.timesteps().iter().enumerate() {
        let prev = schedule.prev_timestep(i);
        for (j, &span) in partitions[i].iter().enumerate() {
            let set = &anchor_sets[i][j];
            let clip = apply_anchors(&gather(&buf, span)?, span, set, &anchors[i])?;
            let out = denoise_clip(model, schedule, &clip, t, prev, &branch.span(span)?, clip_len)?;
            scatter(&mut buf, span, &out)?;
            trace.push(TraceEvent {
                pass,
                position: i,
                timestep: t,
                span,
                anchors: set.clone(),
            });
        }
        if pass == Pass::Main {
            log::info!(
                "step {}/{} t={t} clips={}",
                i + 1,
                schedule.timesteps().len(),
                partitions[i].len()
            );
        }
    }
    Ok(Tensor::cat(&buf, 0)?)
}

/// Latent trajectory (one entry per denoising position) for the whole tensor as one clip.
fn invert_single_clip(
    model: &dyn ClipModel,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    branch: &BranchInputs,
    opts: &InversionOptions,
) -> Result<Vec<Tensor>> {
    let eps = |x: &Tensor, t: usize| model.predict_clip(x, t, branch);
    schedule.ddim_invert_trajectory(x0, &eps, opts)
}

fn run_prior(frames: &VideoFrames, masks: &MaskSequence, config: &InferenceConfig) -> Result<PriorResult> {
    match &config.prior {
        PriorSpec::Builtin => prior::builtin_prior(frames, masks),
        PriorSpec::External { command } => {
            let sampled = if config.guidance_enabled {
                planner::sample_preinference_frames(frames.n_frames(), config.clip_len)?
            } else {
                Vec::new()
            };
            prior::external_prior_guided(command, frames, masks, &sampled)
        }
    }
}

/// Seed of the pre-inference noise draw.
fn preinference_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Runs the full inpainting pipeline.
pub fn inpaint_video(
    frames: &VideoFrames,
    masks: &MaskSequence,
    model: &InferenceModel,
    config: &InferenceConfig,
) -> Result<InpaintOutput> {
    let started = Instant::now();
    config.validate()?;
    check_aligned(frames, masks).stage("input")?;
    let prior = run_prior(frames, masks, config).stage("prior")?;

    if config.bypass_diffusion || masks.is_empty_mask() {
        let out = video::blend_output(&prior.frames, frames, masks, config.blur_sigma).stage("blend")?;
        let plan = if config.bypass_diffusion {
            None
        } else {
            Some(planner::build_plan(frames.n_frames(), config.clip_len, config.steps, config.guidance_enabled).stage("plan")?)
        };
        return Ok(InpaintOutput {
            frames: out,
            prior,
            plan,
            trace: Vec::new(),
            runtime_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let schedule = model.schedule.with_steps(config.steps).stage("schedule")?;
    let n = frames.n_frames();
    let plan = planner::build_plan(n, config.clip_len, config.steps, config.guidance_enabled).stage("plan")?;
    let codec = &model.codec;
    let net = model.net.as_ref();

    let z0 = codec.encode(&prior.frames).stage("encode")?.into_tensor();
    let branch = BranchInputs::new(frames, masks, codec).stage("encode")?;
    let mut trace = Vec::new();

    // pre-inference over the sampled frames as one clip
    let mut anchors: AnchorTrajectory = vec![BTreeMap::new(); config.steps];
    let sampled = &plan.preinference_indices;
    if !sampled.is_empty() {
        let idx = Tensor::from_vec(
            sampled.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            sampled.len(),
            z0.device(),
        )
        .stage("pre-inference")?;
        let z0_s = z0.index_select(&idx, 0).stage("pre-inference")?;
        let branch_s = branch.select(sampled).stage("pre-inference")?;
        let traj = invert_single_clip(net, &schedule, &z0_s, &branch_s, &config.inversion).stage("pre-inference")?;
        let noise = prior::seeded_noise(z0_s.dims(), z0_s.dtype(), preinference_seed(config.seed)).stage("pre-inference")?;
        let x_t = prior::mix_with_noise(&traj[0], &noise, config.prior_strength).stage("pre-inference")?;
        let single = vec![vec![ClipSpan { start: 0, end: sampled.len() }]; config.steps];
        let no_anchor_sets = vec![vec![Vec::new()]; config.steps];
        let empty: AnchorTrajectory = vec![BTreeMap::new(); config.steps];
        let z_pre = denoise_along_plan(
            net,
            &schedule,
            &x_t,
            &single,
            &no_anchor_sets,
            &empty,
            &branch_s,
            config.clip_len,
            Pass::PreInference,
            &mut trace,
        )
        .stage("pre-inference")?;
        let anchor_traj = invert_single_clip(net, &schedule, &z_pre, &branch_s, &config.inversion).stage("anchor inversion")?;
        for (i, level) in anchor_traj.iter().enumerate() {
            for (k, &frame) in sampled.iter().enumerate() {
                anchors[i].insert(frame, level.narrow(0, k, 1).stage("anchor inversion")?);
            }
        }
    }

    let z_inv = invert_along_plan(
        net,
        &schedule,
        &z0,
        &plan.per_timestep,
        &plan.anchor_map,
        &anchors,
        &branch,
        &config.inversion,
    )
    .stage("inversion")?;
    let noise = prior::seeded_noise(z0.dims(), z0.dtype(), config.seed).stage("inversion")?;
    let x_t = prior::mix_with_noise(&z_inv, &noise, config.prior_strength).stage("inversion")?;

    let z = denoise_along_plan(
        net,
        &schedule,
        &x_t,
        &plan.per_timestep,
        &plan.anchor_map,
        &anchors,
        &branch,
        config.clip_len,
        Pass::Main,
        &mut trace,
    )
    .stage("denoise")?;

    let generated = codec.decode(&LatentVideo::new(z).stage("decode")?, frames).stage("decode")?;
    let out = video::blend_output(&generated, frames, masks, config.blur_sigma).stage("blend")?;
    Ok(InpaintOutput {
        frames: out,
        prior,
        plan: Some(plan),
        trace,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

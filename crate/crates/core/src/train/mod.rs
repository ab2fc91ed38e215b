//! Two-stage training: stage 1 fits the spatial UNet, branch, fusion and null
//! context without motion modules on single frames; stage 2 fits only the
//! motion modules on clips. Also codec pretraining and the toy recipe.

pub mod data;
pub mod masks;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::codec::{self, Codec, ConditioningLatent, LatentVideo};
use crate::error::{Error, Result};
use crate::network::{Denoiser, ParamGroup, TemporalMode};
use crate::scheduler::NoiseSchedule;
use crate::video::{MaskSequence, VideoFrames};

pub use data::{static_scene, synthetic_corpus, synthetic_video};
pub use masks::{generate_mask_sequence, MaskGenConfig, MaskShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub clip_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr: 1e-5,
            batch_size: 4,
            n_steps: 1000,
            clip_frames: 22,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be a positive finite number"));
        }
        if self.batch_size == 0 || self.clip_frames == 0 {
            return Err(Error::config("batch_size and clip_frames must be >= 1"));
        }
        Ok(())
    }

    /// Parameter groups updated by the stage.
    pub fn trainable_groups(&self) -> &'static [ParamGroup] {
        match self.stage {
            1 => &[ParamGroup::Spatial, ParamGroup::Branch, ParamGroup::Fusion, ParamGroup::NullText],
            _ => &[ParamGroup::Motion],
        }
    }

    pub fn temporal_mode(&self) -> TemporalMode {
        if self.stage == 1 {
            TemporalMode::Disabled
        } else {
            TemporalMode::Enabled
        }
    }
}

/// One clip (or frame) with a shared timestep and its regression target.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// `[f, 4, h/4, w/4]`
    pub noisy: Tensor,
    /// `[f, 9, h/4, w/4]`
    pub cond: ConditioningLatent,
    pub timestep: usize,
    /// Target noise, same shape as `noisy`.
    pub eps: Tensor,
}

fn normal_tensor(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Draws `t` uniformly from `[0, T)` and builds one sample.
pub fn make_training_batch(
    frames: &VideoFrames,
    masks: &MaskSequence,
    codec: &Codec,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    let t = rng.gen_range(0..schedule.train_timesteps());
    make_training_sample_at(frames, masks, codec, schedule, t, rng)
}

/// Like [`make_training_batch`] with a given timestep.
pub fn make_training_sample_at(
    frames: &VideoFrames,
    masks: &MaskSequence,
    codec: &Codec,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    let z0 = codec.encode(frames)?;
    let masked = codec.encode(&frames.masked(masks)?)?;
    let mask_small = codec::downsample_mask(masks, codec.dtype())?;
    let eps = normal_tensor(z0.data().dims(), z0.data().dtype(), rng)?;
    let noisy = schedule.add_noise(z0.data(), &eps, t)?;
    let cond = codec::assemble_condition(&masked, &mask_small, &LatentVideo::new(noisy.clone())?)?;
    Ok(TrainingSample {
        noisy,
        cond,
        timestep: t,
        eps,
    })
}

/// Mean squared error between predicted and true noise.
pub fn epsilon_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Predicted noise for one sample.
pub fn predict_sample(net: &Denoiser, s: &TrainingSample, mode: TemporalMode) -> Result<Tensor> {
    let feats = net.brushnet_forward(s.cond.data(), &[s.timestep])?;
    net.forward(&s.noisy, &[s.timestep], Some(&feats), mode)
}

/// Loss over a batch. Without motion modules every frame is independent, so
/// samples are stacked along the frame axis with per-frame timesteps.
pub fn batch_loss(net: &Denoiser, samples: &[TrainingSample], mode: TemporalMode) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if mode == TemporalMode::Disabled {
        let mut ts = Vec::new();
        for s in samples {
            ts.extend(std::iter::repeat(s.timestep).take(s.noisy.dim(0)?));
        }
        let noisy = Tensor::cat(&samples.iter().map(|s| &s.noisy).collect::<Vec<_>>(), 0)?;
        let cond = Tensor::cat(&samples.iter().map(|s| s.cond.data()).collect::<Vec<_>>(), 0)?;
        let eps = Tensor::cat(&samples.iter().map(|s| &s.eps).collect::<Vec<_>>(), 0)?;
        let feats = net.brushnet_forward(&cond, &ts)?;
        let pred = net.forward(&noisy, &ts, Some(&feats), mode)?;
        return epsilon_loss(&pred, &eps);
    }
    let mut total: Option<Tensor> = None;
    for s in samples {
        let l = epsilon_loss(&predict_sample(net, s, mode)?, &s.eps)?;
        total = Some(match total {
            None => l,
            Some(acc) => (acc + l)?,
        });
    }
    Ok((total.expect("non-empty batch") / samples.len() as f64)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adam over the stage's trainable groups of a [`Model`].
pub struct Trainer {
    model: Model,
    net: Denoiser,
    codec: Codec,
    schedule: NoiseSchedule,
    opt: AdamW,
    config: TrainConfig,
    step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let groups = config.trainable_groups();
        let net = model.denoiser(groups)?;
        let codec = model.codec(false)?;
        let schedule = model.schedule()?;
        let opt = AdamW::new(
            model.store.vars_in(groups),
            ParamsAdamW {
                lr: config.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            net,
            codec,
            schedule,
            opt,
            config,
            step: 0,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn net(&self) -> &Denoiser {
        &self.net
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Random samples from `videos`: single frames in stage 1, clips in stage 2.
    pub fn sample_batch(&mut self, videos: &[(VideoFrames, MaskSequence)]) -> Result<Vec<TrainingSample>> {
        if videos.is_empty() {
            return Err(Error::invalid("no training videos"));
        }
        let len = if self.config.stage == 1 { 1 } else { self.config.clip_frames };
        (0..self.config.batch_size)
            .map(|_| {
                let (v, m) = &videos[self.rng.gen_range(0..videos.len())];
                let f = v.n_frames();
                let take = len.min(f);
                let start = self.rng.gen_range(0..=f - take);
                let idx: Vec<usize> = (start..start + take).collect();
                make_training_batch(&v.select(&idx), &m.select(&idx), &self.codec, &self.schedule, &mut self.rng)
            })
            .collect()
    }

    /// Loss of the current parameters in the stage's temporal mode.
    pub fn loss(&self, samples: &[TrainingSample]) -> Result<f64> {
        scalar(&batch_loss(&self.net, samples, self.config.temporal_mode())?)
    }

    /// One Adam update; returns the loss before the update.
    pub fn train_step(&mut self, samples: &[TrainingSample]) -> Result<f64> {
        let loss = batch_loss(&self.net, samples, self.config.temporal_mode())?;
        let value = scalar(&loss)?;
        self.step += 1;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss: value,
            });
        }
        self.opt.backward_step(&loss)?;
        Ok(value)
    }

    /// Runs `n_steps` on random batches, logging each step.
    pub fn fit(&mut self, videos: &[(VideoFrames, MaskSequence)], log: &mut dyn FnMut(usize, f64, f64) -> Result<()>) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.config.n_steps);
        for _ in 0..self.config.n_steps {
            let batch = self.sample_batch(videos)?;
            let l = self.train_step(&batch)?;
            log(self.step, l, self.config.lr)?;
            losses.push(l);
        }
        Ok(losses)
    }
}

/// CSV training log with header `step,loss,lr`.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "step,loss,lr")?;
        Ok(Self { out })
    }

    pub fn record(&mut self, step: usize, loss: f64, lr: f64) -> Result<()> {
        writeln!(self.out, "{step},{loss},{lr}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_frames: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 2e-3,
            batch_frames: 8,
            seed: 0,
        }
    }
}

/// Fits the learned codec to reconstruct frames (MSE), then rescales latents to unit variance.
pub fn train_codec(model: &mut Model, videos: &[VideoFrames], cfg: &CodecTrainConfig) -> Result<Vec<f64>> {
    if videos.is_empty() {
        return Err(Error::invalid("no videos for codec training"));
    }
    let codec = model.codec(true)?;
    let mut opt = AdamW::new(
        model.store.vars_in(&[ParamGroup::Codec]),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dtype = model.store.dtype();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let frames: Vec<Tensor> = (0..cfg.batch_frames.max(1))
            .map(|_| {
                let v = &videos[rng.gen_range(0..videos.len())];
                let i = rng.gen_range(0..v.n_frames());
                codec::frames_to_tensor(&v.select(&[i]).into_data(), dtype)
            })
            .collect::<Result<_>>()?;
        let x = Tensor::cat(&frames, 0)?;
        let loss = epsilon_loss(&codec.decode_tensor(&codec.encode_tensor(&x)?)?, &x)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1, loss: value });
        }
        opt.backward_step(&loss)?;
        losses.push(value);
    }
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut n = 0usize;
    for v in videos {
        let z = codec.encode(v)?.into_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        n += z.len();
        sum += z.iter().sum::<f64>();
        sum2 += z.iter().map(|x| x * x).sum::<f64>();
    }
    let mean = sum / n as f64;
    let std = (sum2 / n as f64 - mean * mean).max(1e-12).sqrt();
    model.config.codec.latent_scale /= std;
    Ok(losses)
}

/// The scripted toy run: codec pretraining on a synthetic corpus, then both
/// denoiser stages, either overfitting a fixed batch drawn from one synthetic
/// video or on random batches from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecipe {
    pub size: usize,
    pub frames: usize,
    pub corpus_videos: usize,
    pub codec: CodecTrainConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    pub samples: usize,
    /// Train on the fixed samples (overfit) instead of random corpus batches.
    pub fixed_batch: bool,
    pub masks_per_video: usize,
    pub seed: u64,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        Self {
            size: 32,
            frames: 8,
            corpus_videos: 16,
            codec: CodecTrainConfig::default(),
            stage1_steps: 350,
            stage2_steps: 150,
            lr: 1e-3,
            samples: 2,
            fixed_batch: true,
            masks_per_video: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyReport {
    pub codec_losses: Vec<f64>,
    /// Full-model loss on the fixed batch before training.
    pub initial_loss: f64,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    /// Full-model loss on the fixed batch after both stages.
    pub final_loss: f64,
    /// Whether stage 2 left every non-motion parameter bitwise unchanged.
    pub stage2_isolated: bool,
}

/// Fixed samples: the whole video with masks from `seed`, at timesteps spread over the schedule.
pub fn fixed_samples(
    video: &VideoFrames,
    codec: &Codec,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let cfg = MaskGenConfig::random(seed.wrapping_add(k as u64));
            let m = generate_mask_sequence(video.height(), video.width(), video.n_frames(), &cfg)?;
            let t = (schedule.train_timesteps() * (2 * k + 1)) / (2 * n);
            make_training_sample_at(video, &m, codec, schedule, t, &mut rng)
        })
        .collect()
}

/// A fresh model with its codec fitted to the recipe's corpus.
pub fn toy_codec_model(model_config: crate::checkpoint::ModelConfig, recipe: &ToyRecipe) -> Result<(Model, Vec<f64>)> {
    let mut model = Model::init(model_config, DType::F32, recipe.seed)?;
    let corpus = toy_corpus(recipe)?;
    let losses = train_codec(&mut model, &corpus, &CodecTrainConfig { seed: recipe.seed, ..recipe.codec })?;
    Ok((model, losses))
}

fn toy_corpus(recipe: &ToyRecipe) -> Result<Vec<VideoFrames>> {
    synthetic_corpus(recipe.corpus_videos, recipe.size, recipe.size, recipe.frames, recipe.seed.wrapping_add(1000))
}

/// Codec pretraining followed by [`train_toy_denoiser`].
pub fn run_toy_training(model_config: crate::checkpoint::ModelConfig, recipe: &ToyRecipe) -> Result<(Model, ToyReport)> {
    let (model, codec_losses) = toy_codec_model(model_config, recipe)?;
    let (model, mut report) = train_toy_denoiser(model, recipe)?;
    report.codec_losses = codec_losses;
    Ok((model, report))
}

/// Stage 1 then stage 2 on a model whose codec is already trained.
pub fn train_toy_denoiser(mut model: Model, recipe: &ToyRecipe) -> Result<(Model, ToyReport)> {
    let video = synthetic_video(recipe.size, recipe.size, recipe.frames, recipe.seed.wrapping_add(7))?;
    let codec = model.codec(false)?;
    let schedule = model.schedule()?;
    let samples = fixed_samples(&video, &codec, &schedule, recipe.samples, recipe.seed)?;
    let full_loss = |m: &mut Model| -> Result<f64> {
        let net = m.denoiser(&[])?;
        scalar(&batch_loss(&net, &samples, TemporalMode::Enabled)?)
    };
    let initial_loss = full_loss(&mut model)?;

    let mut pairs = Vec::new();
    if !recipe.fixed_batch {
        for (k, v) in toy_corpus(recipe)?.iter().enumerate() {
            for j in 0..recipe.masks_per_video {
                let cfg = MaskGenConfig::random(recipe.seed.wrapping_add((k * recipe.masks_per_video + j) as u64 + 1));
                pairs.push((v.clone(), generate_mask_sequence(v.height(), v.width(), v.n_frames(), &cfg)?));
            }
        }
    }
    let stage = |model: Model, stage: u8, steps: usize| -> Result<(Model, Vec<f64>)> {
        let cfg = TrainConfig {
            stage,
            lr: recipe.lr,
            batch_size: recipe.samples,
            n_steps: steps,
            clip_frames: recipe.frames,
            seed: recipe.seed,
        };
        let mut trainer = Trainer::new(model, cfg)?;
        let losses = (0..steps)
            .map(|_| {
                if recipe.fixed_batch {
                    trainer.train_step(&samples)
                } else {
                    let batch = trainer.sample_batch(&pairs)?;
                    trainer.train_step(&batch)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((trainer.into_model(), losses))
    };
    let (model, stage1_losses) = stage(model, 1, recipe.stage1_steps)?;
    let frozen: Vec<ParamGroup> = ParamGroup::ALL.into_iter().filter(|&g| g != ParamGroup::Motion).collect();
    let before = frozen.iter().map(|&g| model.store.snapshot(g)).collect::<Result<Vec<_>>>()?;
    let (mut model, stage2_losses) = stage(model, 2, recipe.stage2_steps)?;
    let after = frozen.iter().map(|&g| model.store.snapshot(g)).collect::<Result<Vec<_>>>()?;
    let final_loss = full_loss(&mut model)?;
    Ok((
        model,
        ToyReport {
            codec_losses: Vec::new(),
            initial_loss,
            stage1_losses,
            stage2_losses,
            final_loss,
            stage2_isolated: before == after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ModelConfig;
    use crate::codec::CodecConfig;
    use crate::network::NetConfig;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            net: NetConfig::tiny(),
            codec: CodecConfig { hidden: 8, ..Default::default() },
            ..Default::default()
        };
        Model::init(cfg, DType::F32, 1).unwrap()
    }

    fn clip() -> (VideoFrames, MaskSequence) {
        let v = synthetic_video(16, 16, 3, 4).unwrap();
        let m = generate_mask_sequence(16, 16, 3, &MaskGenConfig::new(0.3, 20.0, MaskShape::Ellipse, 2)).unwrap();
        (v, m)
    }

    #[test]
    fn batch_shapes_and_determinism() {
        let mut model = tiny_model();
        let codec = model.codec(false).unwrap();
        let schedule = model.schedule().unwrap();
        let (v, m) = clip();
        let a = make_training_batch(&v, &m, &codec, &schedule, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_training_batch(&v, &m, &codec, &schedule, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.noisy.dims(), &[3, 4, 4, 4]);
        assert_eq!(a.cond.data().dims(), &[3, 9, 4, 4]);
        assert_eq!(a.timestep, b.timestep);
        let vals = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(vals(&a.noisy), vals(&b.noisy));
        assert_eq!(vals(&a.eps), vals(&b.eps));
    }

    #[test]
    fn timestep_zero_is_nearly_clean() {
        let mut model = tiny_model();
        let codec = model.codec(false).unwrap();
        let schedule = model.schedule().unwrap();
        let (v, m) = clip();
        let s = make_training_sample_at(&v, &m, &codec, &schedule, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let z0 = codec.encode(&v).unwrap().into_tensor();
        let d = (s.noisy - z0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        let scale = s.eps.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d <= 1e-2 * scale.max(1.0) + 1e-2, "{d}");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let e = normal_tensor(&[2, 4, 3, 3], DType::F64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(scalar(&epsilon_loss(&e, &e).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn stage2_only_changes_motion() {
        let model = tiny_model();
        let (v, m) = clip();
        let cfg = TrainConfig { stage: 2, lr: 1e-2, batch_size: 1, clip_frames: 3, ..Default::default() };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let snap = |t: &Trainer| ParamGroup::ALL.map(|g| t.model().store.snapshot(g).unwrap());
        let before = snap(&trainer);
        let videos = vec![(v, m)];
        for _ in 0..2 {
            let b = trainer.sample_batch(&videos).unwrap();
            trainer.train_step(&b).unwrap();
        }
        let after = snap(&trainer);
        for (k, g) in ParamGroup::ALL.iter().enumerate() {
            if *g == ParamGroup::Motion {
                assert_ne!(before[k], after[k]);
            } else {
                assert_eq!(before[k], after[k], "{g:?} changed");
            }
        }
    }

    #[test]
    fn stage1_leaves_motion_untouched() {
        let model = tiny_model();
        let (v, m) = clip();
        let cfg = TrainConfig { stage: 1, lr: 1e-2, batch_size: 2, ..Default::default() };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let before = trainer.model().store.snapshot(ParamGroup::Motion).unwrap();
        let spatial = trainer.model().store.snapshot(ParamGroup::Spatial).unwrap();
        let videos = vec![(v, m)];
        let b = trainer.sample_batch(&videos).unwrap();
        assert!(b.iter().all(|s| s.noisy.dim(0).unwrap() == 1));
        trainer.train_step(&b).unwrap();
        assert_eq!(before, trainer.model().store.snapshot(ParamGroup::Motion).unwrap());
        assert_ne!(spatial, trainer.model().store.snapshot(ParamGroup::Spatial).unwrap());
    }

    #[test]
    fn loss_is_deterministic() {
        let model = tiny_model();
        let (v, m) = clip();
        let trainer = Trainer::new(model, TrainConfig::default()).unwrap();
        let b = make_training_batch(&v, &m, trainer.codec(), trainer.schedule(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let samples = [b];
        assert_eq!(trainer.loss(&samples).unwrap(), trainer.loss(&samples).unwrap());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let model = tiny_model();
        let (v, m) = clip();
        let mut trainer = Trainer::new(model, TrainConfig::default()).unwrap();
        let mut b = make_training_batch(&v, &m, trainer.codec(), trainer.schedule(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        b.eps = (b.eps * f64::NAN).unwrap();
        assert!(matches!(trainer.train_step(&[b]), Err(Error::NonFiniteLoss { step: 1, .. })));
    }

    #[test]
    fn codec_training_reduces_error_and_normalizes_latents() {
        let mut model = tiny_model();
        let corpus = synthetic_corpus(2, 16, 16, 2, 0).unwrap();
        let losses = train_codec(&mut model, &corpus, &CodecTrainConfig { steps: 60, batch_frames: 2, ..Default::default() }).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let codec = model.codec(false).unwrap();
        let z = codec.encode(&corpus[0]).unwrap().into_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let var = z.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / z.len() as f64;
        assert!((0.3..3.0).contains(&var), "{var}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { stage: 3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
    }

    #[test]
    fn csv_log_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let mut log = TrainLog::create(&p).unwrap();
        log.record(1, 0.5, 1e-5).unwrap();
        log.flush().unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,loss,lr\n1,0.5,0.00001\n");
    }
}

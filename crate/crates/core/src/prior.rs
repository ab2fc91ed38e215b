//! Prior inpainting results and their injection into the initial noisy latent.

use std::path::Path;
use std::process::Command;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, LatentVideo};
use crate::error::{Error, Result};
use crate::scheduler::{EpsilonModel, InversionOptions, NoiseSchedule};
use crate::video::{self, check_aligned, MaskSequence, VideoFrames};

pub const HARMONIC_TOL: f64 = 1e-4;
pub const HARMONIC_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    Builtin,
    External,
}

/// A fully completed video whose unmasked pixels equal the input.
#[derive(Debug, Clone)]
pub struct PriorResult {
    pub frames: VideoFrames,
    pub source: PriorSource,
}

/// Zero-motion temporal propagation followed by harmonic fill.
///
/// A masked pixel takes the value at the same location in the temporally
/// nearest frame where it is unmasked (the earlier frame wins ties). Pixels
/// never unmasked are filled per frame by Gauss-Seidel relaxation of the
/// Laplace equation, started from the mean of the frame's known pixels.
pub fn builtin_prior(frames: &VideoFrames, masks: &MaskSequence) -> Result<PriorResult> {
    check_aligned(frames, masks)?;
    let (f, _, h, w) = frames.data().dim();
    let src = frames.data();
    let m = masks.data();
    let mut out = src.clone();
    let mut known = Array4::<bool>::from_shape_fn((f, 1, h, w), |(i, _, y, x)| m[[i, 0, y, x]] == 0.0);

    for y in 0..h {
        for x in 0..w {
            // nearest unmasked frame before / after each frame
            let mut before = vec![None; f];
            let mut last = None;
            for i in 0..f {
                before[i] = last;
                if m[[i, 0, y, x]] == 0.0 {
                    last = Some(i);
                }
            }
            let mut after = vec![None; f];
            let mut next = None;
            for i in (0..f).rev() {
                after[i] = next;
                if m[[i, 0, y, x]] == 0.0 {
                    next = Some(i);
                }
            }
            for i in 0..f {
                if m[[i, 0, y, x]] == 0.0 {
                    continue;
                }
                let pick = match (before[i], after[i]) {
                    (Some(b), Some(a)) => Some(if i - b <= a - i { b } else { a }),
                    (b, a) => b.or(a),
                };
                if let Some(j) = pick {
                    for c in 0..3 {
                        out[[i, c, y, x]] = src[[j, c, y, x]];
                    }
                    known[[i, 0, y, x]] = true;
                }
            }
        }
    }

    for i in 0..f {
        let holes: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| !known[[i, 0, y, x]])
            .collect();
        if holes.is_empty() {
            continue;
        }
        for c in 0..3 {
            let mut plane = Array2::from_shape_fn((h, w), |(y, x)| out[[i, c, y, x]]);
            let (sum, count) = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| known[[i, 0, y, x]])
                .fold((0.0, 0usize), |(s, n), (y, x)| (s + plane[[y, x]], n + 1));
            let init = if count > 0 { sum / count as f64 } else { 0.5 };
            for &(y, x) in &holes {
                plane[[y, x]] = init;
            }
            harmonic_fill(&mut plane, &holes);
            for &(y, x) in &holes {
                out[[i, c, y, x]] = plane[[y, x]].clamp(0.0, 1.0);
            }
        }
    }
    Ok(PriorResult {
        frames: frames.with_data(out)?,
        source: PriorSource::Builtin,
    })
}

fn harmonic_fill(plane: &mut Array2<f64>, holes: &[(usize, usize)]) {
    let (h, w) = plane.dim();
    for _ in 0..HARMONIC_MAX_ITERS {
        let mut max_update = 0.0f64;
        for &(y, x) in holes {
            let mut sum = 0.0;
            let mut n = 0.0;
            if y > 0 {
                sum += plane[[y - 1, x]];
                n += 1.0;
            }
            if y + 1 < h {
                sum += plane[[y + 1, x]];
                n += 1.0;
            }
            if x > 0 {
                sum += plane[[y, x - 1]];
                n += 1.0;
            }
            if x + 1 < w {
                sum += plane[[y, x + 1]];
                n += 1.0;
            }
            let v = sum / n;
            max_update = max_update.max((v - plane[[y, x]]).abs());
            plane[[y, x]] = v;
        }
        if max_update < HARMONIC_TOL {
            break;
        }
    }
}

/// Runs `command --frames <dir> --masks <dir> --out <dir>` and validates its output.
///
/// The command string is split on whitespace; the first token is the program.
/// Output frames with an alpha channel mark unfilled pixels with alpha below 128.
pub fn external_prior(command: &str, frames: &VideoFrames, masks: &MaskSequence) -> Result<PriorResult> {
    check_aligned(frames, masks)?;
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::ExternalPrior("empty command".into()))?;
    let work = tempfile::tempdir()?;
    let (fdir, mdir, odir) = (work.path().join("frames"), work.path().join("masks"), work.path().join("out"));
    video::save_frames(frames, &fdir)?;
    video::save_masks(masks, frames.original_size, &mdir)?;
    std::fs::create_dir_all(&odir)?;
    let status = Command::new(program)
        .args(parts)
        .arg("--frames")
        .arg(&fdir)
        .arg("--masks")
        .arg(&mdir)
        .arg("--out")
        .arg(&odir)
        .status()
        .map_err(|e| Error::ExternalPrior(format!("cannot run {program}: {e}")))?;
    if !status.success() {
        return Err(Error::ExternalPrior(format!("{program} exited with {status}")));
    }
    check_unfilled(&odir, masks, frames.original_size)?;
    let out = video::load_frames(&odir).map_err(|e| Error::ExternalPrior(format!("reading output: {e}")))?;
    if out.data().dim() != frames.data().dim() {
        return Err(Error::PriorValidation(format!(
            "output shape {:?} differs from input {:?}",
            out.data().dim(),
            frames.data().dim()
        )));
    }
    validate_and_snap(out, frames, masks, PriorSource::External)
}

/// External prior in two passes: the sampled frames first, then the whole video
/// with the sampled frames' results supplied as known content.
pub fn external_prior_guided(
    command: &str,
    frames: &VideoFrames,
    masks: &MaskSequence,
    sampled: &[usize],
) -> Result<PriorResult> {
    if sampled.is_empty() || sampled.len() >= frames.n_frames() {
        return external_prior(command, frames, masks);
    }
    let first = external_prior(command, &frames.select(sampled), &masks.select(sampled))?;
    let mut guided = frames.data().clone();
    let mut guided_masks = masks.data().clone();
    for (k, &i) in sampled.iter().enumerate() {
        guided
            .index_axis_mut(Axis(0), i)
            .assign(&first.frames.data().index_axis(Axis(0), k));
        guided_masks.index_axis_mut(Axis(0), i).fill(0.0);
    }
    let second = external_prior(command, &frames.with_data(guided)?, &MaskSequence::new(guided_masks)?)?;
    validate_and_snap(second.frames, frames, masks, PriorSource::External)
}

fn check_unfilled(dir: &Path, masks: &MaskSequence, size: (usize, usize)) -> Result<()> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    if files.len() != masks.n_frames() {
        return Err(Error::PriorValidation(format!(
            "expected {} output frames, found {}",
            masks.n_frames(),
            files.len()
        )));
    }
    for (i, path) in files.iter().enumerate() {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        if !img.color().has_alpha() {
            continue;
        }
        let rgba = img.to_rgba8();
        for (x, y, px) in rgba.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            if y < size.0 && x < size.1 && masks.data()[[i, 0, y, x]] == 1.0 && px[3] < 128 {
                return Err(Error::PriorValidation(format!(
                    "hole left unfilled at frame {i}, pixel ({y}, {x})"
                )));
            }
        }
    }
    Ok(())
}

/// Checks the off-mask region against the input (1/255 tolerance) and copies it back exactly.
pub fn validate_and_snap(out: VideoFrames, input: &VideoFrames, masks: &MaskSequence, source: PriorSource) -> Result<PriorResult> {
    let tol = 1.0 / 255.0 + 1e-9;
    let mut data = out.into_data();
    for ((f, c, y, x), v) in data.indexed_iter_mut() {
        if masks.data()[[f, 0, y, x]] == 0.0 {
            let orig = input.data()[[f, c, y, x]];
            if (*v - orig).abs() > tol {
                return Err(Error::PriorValidation(format!(
                    "unmasked pixel changed at frame {f}, channel {c}, ({y}, {x}): {orig} -> {v}"
                )));
            }
            *v = orig;
        }
    }
    Ok(PriorResult {
        frames: input.with_data(data)?,
        source,
    })
}

/// Standard-normal tensor from a ChaCha stream seeded with `seed`.
pub fn seeded_noise(shape: &[usize], dtype: DType, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `strength * inverted + (1 - strength) * noise`.
pub fn mix_with_noise(inverted: &Tensor, noise: &Tensor, strength: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid(format!("prior strength {strength} outside [0, 1]")));
    }
    if inverted.dims() != noise.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", inverted.dims(), noise.dims())));
    }
    Ok(((inverted * strength)? + (noise * (1.0 - strength))?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectOptions {
    pub strength: f64,
    pub seed: u64,
    pub inversion: InversionOptions,
}

impl Default for InjectOptions {
    fn default() -> Self {
        Self {
            strength: 1.0,
            seed: 0,
            inversion: InversionOptions::default(),
        }
    }
}

/// Encodes the prior, inverts it to the largest inference timestep and mixes in seeded noise.
///
/// `model` sees the whole video as one clip.
pub fn inject_prior(
    prior: &PriorResult,
    codec: &Codec,
    schedule: &NoiseSchedule,
    model: &dyn EpsilonModel,
    opts: &InjectOptions,
) -> Result<LatentVideo> {
    if !(0.0..=1.0).contains(&opts.strength) {
        return Err(Error::invalid(format!("prior strength {} outside [0, 1]", opts.strength)));
    }
    let z0 = codec.encode(&prior.frames)?;
    let inverted = schedule.ddim_invert(z0.data(), model, &opts.inversion)?;
    let noise = seeded_noise(inverted.dims(), inverted.dtype(), opts.seed)?;
    LatentVideo::new(mix_with_noise(&inverted, &noise, opts.strength)?)
}

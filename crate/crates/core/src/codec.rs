//! Pixel <-> latent mapping at 4x spatial downsampling, mask pooling and
//! assembly of the 9-channel conditioning input.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Conv2d;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::blocks::conv;
use crate::network::{ParamGroup, ParamStore};
use crate::video::{MaskSequence, VideoFrames};

pub const DOWNSAMPLE: usize = 4;
pub const LATENT_CHANNELS: usize = 4;
pub const LOSSLESS_CHANNELS: usize = 3 * DOWNSAMPLE * DOWNSAMPLE;
pub const COND_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    /// Trained 4-channel autoencoder.
    Learned,
    /// Space-to-depth followed by a fixed orthogonal channel mixing; 48 channels.
    Lossless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub hidden: usize,
    /// Multiplier applied to encoder outputs so latents have roughly unit variance.
    pub latent_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::Learned,
            hidden: 64,
            latent_scale: 1.0,
        }
    }
}

/// Latent stack `[f, c, h/4, w/4]`.
#[derive(Debug, Clone)]
pub struct LatentVideo {
    data: Tensor,
}

impl LatentVideo {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims4()?;
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn n_frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }
}

/// Branch input `[f, 9, h/4, w/4]`: masked-image latent, mask, noisy latent.
#[derive(Debug, Clone)]
pub struct ConditioningLatent {
    data: Tensor,
}

impl ConditioningLatent {
    pub fn data(&self) -> &Tensor {
        &self.data
    }
}

#[derive(Debug, Clone)]
struct LearnedCodec {
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    learned: Option<LearnedCodec>,
    dtype: DType,
}

/// Normalized 16x16 Walsh-Hadamard matrix; symmetric and orthogonal, entries `±1/4`.
fn hadamard16() -> Vec<f64> {
    let n = DOWNSAMPLE * DOWNSAMPLE;
    let mut h = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let sign = if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            h[r * n + c] = sign / 4.0;
        }
    }
    h
}

/// `[f, 3, h, w] -> [f, 48, h/4, w/4]`, channel index `c*16 + dy*4 + dx`.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (f, c, h, w) = x.dims4()?;
    let d = DOWNSAMPLE;
    Ok(x.reshape((f, c, h / d, d, w / d, d))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((f, c * d * d, h / d, w / d))?)
}

pub fn depth_to_space(z: &Tensor) -> Result<Tensor> {
    let (f, cd, h, w) = z.dims4()?;
    let d = DOWNSAMPLE;
    let c = cd / (d * d);
    Ok(z.reshape((f, c, d, d, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((f, c, h * d, w * d))?)
}

/// Applies the Hadamard mixing to each color's 16 sub-pixel channels.
fn mix(z: &Tensor) -> Result<Tensor> {
    let (f, _, h, w) = z.dims4()?;
    let n = DOWNSAMPLE * DOWNSAMPLE;
    let hm = Tensor::from_vec(hadamard16(), (n, n), z.device())?.to_dtype(z.dtype())?;
    let grouped = z.reshape((f * 3, n, h * w))?;
    Ok(hm.broadcast_matmul(&grouped)?.reshape((f, 3 * n, h, w))?)
}

pub fn frames_to_tensor(frames: &Array4<f64>, dtype: DType) -> Result<Tensor> {
    let shape = frames.dim();
    let data: Vec<f64> = frames.iter().copied().collect();
    Ok(Tensor::from_vec(data, (shape.0, shape.1, shape.2, shape.3), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_frames(t: &Tensor) -> Result<Array4<f64>> {
    let (f, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array4::from_shape_vec((f, c, h, w), v).map_err(|e| Error::shape(e.to_string()))
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::shape(format!(
            "spatial size {h}x{w} is not divisible by {DOWNSAMPLE}"
        )));
    }
    Ok(())
}

impl Codec {
    pub fn lossless(dtype: DType) -> Self {
        Self {
            config: CodecConfig {
                mode: CodecMode::Lossless,
                ..CodecConfig::default()
            },
            learned: None,
            dtype,
        }
    }

    /// Resolves the learned codec's parameters under `codec.*` in `store`.
    pub fn build(store: &mut ParamStore, config: &CodecConfig, trainable: bool) -> Result<Self> {
        let dtype = store.dtype();
        if config.mode == CodecMode::Lossless {
            return Ok(Self {
                config: config.clone(),
                learned: None,
                dtype,
            });
        }
        let groups: &[ParamGroup] = if trainable { &[ParamGroup::Codec] } else { &[] };
        let mut root = store.builder(groups);
        let mut b = root.pp("codec");
        let hd = config.hidden;
        let learned = LearnedCodec {
            enc1: conv(&mut b.pp("enc1"), LOSSLESS_CHANNELS, hd, 1, 1, false)?,
            enc2: conv(&mut b.pp("enc2"), hd, LATENT_CHANNELS, 3, 1, false)?,
            dec1: conv(&mut b.pp("dec1"), LATENT_CHANNELS, hd, 3, 1, false)?,
            dec2: conv(&mut b.pp("dec2"), hd, hd, 3, 1, false)?,
            dec3: conv(&mut b.pp("dec3"), hd, LOSSLESS_CHANNELS, 1, 1, false)?,
        };
        Ok(Self {
            config: config.clone(),
            learned: Some(learned),
            dtype,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn mode(&self) -> CodecMode {
        self.config.mode
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn latent_channels(&self) -> usize {
        match self.config.mode {
            CodecMode::Learned => LATENT_CHANNELS,
            CodecMode::Lossless => LOSSLESS_CHANNELS,
        }
    }

    pub fn set_latent_scale(&mut self, scale: f64) {
        self.config.latent_scale = scale;
    }

    /// Differentiable encoder over pixel tensors `[f, 3, h, w]`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        check_divisible(h, w)?;
        let s2d = space_to_depth(x)?;
        match &self.learned {
            None => mix(&s2d),
            Some(m) => {
                let z = m.enc2.forward(&m.enc1.forward(&((s2d - 0.5)? * 2.0)?)?.silu()?)?;
                Ok((z * self.config.latent_scale)?)
            }
        }
    }

    /// Differentiable decoder; output is not clipped.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.latent_channels() {
            return Err(Error::shape(format!(
                "latent has {c} channels, codec expects {}",
                self.latent_channels()
            )));
        }
        match &self.learned {
            None => depth_to_space(&mix(z)?),
            Some(m) => {
                let z = (z / self.config.latent_scale)?;
                let h = m.dec2.forward(&m.dec1.forward(&z)?.silu()?)?.silu()?;
                let out = ((m.dec3.forward(&h)? / 2.0)? + 0.5)?;
                depth_to_space(&out)
            }
        }
    }

    pub fn encode(&self, frames: &VideoFrames) -> Result<LatentVideo> {
        let x = frames_to_tensor(frames.data(), self.dtype)?;
        LatentVideo::new(self.encode_tensor(&x)?)
    }

    /// Decodes and clips to `[0, 1]`, keeping `like`'s metadata.
    pub fn decode(&self, latent: &LatentVideo, like: &VideoFrames) -> Result<VideoFrames> {
        let x = self.decode_tensor(&latent.data)?;
        like.with_data(tensor_to_frames(&x)?)
    }

    /// Decodes into a fresh video without metadata.
    pub fn decode_frames(&self, latent: &LatentVideo) -> Result<VideoFrames> {
        let x = self.decode_tensor(&latent.data)?.clamp(0.0, 1.0)?;
        VideoFrames::new(tensor_to_frames(&x)?)
    }
}

/// 4x4 max-pool of the masks to latent resolution: `[f, 1, h/4, w/4]`.
pub fn downsample_mask(masks: &MaskSequence, dtype: DType) -> Result<Tensor> {
    let (_, h, w) = masks.dims();
    check_divisible(h, w)?;
    let m = frames_like(masks.data(), dtype)?;
    Ok(m.max_pool2d(DOWNSAMPLE)?)
}

fn frames_like(a: &Array4<f64>, dtype: DType) -> Result<Tensor> {
    frames_to_tensor(a, dtype)
}

/// Concatenates masked-image latent, pooled mask and noisy latent along channels.
pub fn assemble_condition(masked: &LatentVideo, mask_small: &Tensor, noisy: &LatentVideo) -> Result<ConditioningLatent> {
    for (name, l) in [("masked-image", masked), ("noisy", noisy)] {
        if l.channels() != LATENT_CHANNELS {
            return Err(Error::shape(format!(
                "{name} latent has {} channels; conditioning needs the {LATENT_CHANNELS}-channel codec",
                l.channels()
            )));
        }
    }
    let (mf, mc, mh, mw) = mask_small.dims4()?;
    let dims = |t: &Tensor| -> Result<(usize, usize, usize)> {
        let (f, _, h, w) = t.dims4()?;
        Ok((f, h, w))
    };
    if mc != 1 || dims(&masked.data)? != (mf, mh, mw) || dims(&noisy.data)? != (mf, mh, mw) {
        return Err(Error::shape(format!(
            "conditioning parts disagree: masked {:?}, mask {:?}, noisy {:?}",
            masked.data.dims(),
            mask_small.dims(),
            noisy.data.dims()
        )));
    }
    let mask = mask_small.to_dtype(noisy.data.dtype())?;
    let masked = masked.data.to_dtype(noisy.data.dtype())?;
    Ok(ConditioningLatent {
        data: Tensor::cat(&[&masked, &mask, &noisy.data], 1)?,
    })
}

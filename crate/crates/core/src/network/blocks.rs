//! Building blocks of the denoiser: residual blocks, spatial self- and
//! cross-attention, temporal attention and the zero-initialized fusion projection.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};

use super::params::{Builder, Init};
use crate::error::Result;

pub(crate) fn conv(b: &mut Builder, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Result<Conv2d> {
    let fan_in = cin * k * k;
    let (wi, bi) = if zero {
        (Init::Zeros, Init::Zeros)
    } else {
        (Init::FanIn(fan_in), Init::FanIn(fan_in))
    };
    let w = b.get("weight", &[cout, cin, k, k], wi)?;
    let bias = b.get("bias", &[cout], bi)?;
    Ok(Conv2d::new(
        w,
        Some(bias),
        Conv2dConfig {
            padding: k / 2,
            stride,
            dilation: 1,
            groups: 1,
            cudnn_fwd_algo: None,
        },
    ))
}

pub(crate) fn linear(b: &mut Builder, din: usize, dout: usize, zero: bool) -> Result<Linear> {
    let init = if zero { Init::Zeros } else { Init::FanIn(din) };
    let w = b.get("weight", &[dout, din], init)?;
    let bias = b.get("bias", &[dout], init)?;
    Ok(Linear::new(w, Some(bias)))
}

pub(crate) fn group_norm(b: &mut Builder, channels: usize, groups: usize) -> Result<GroupNorm> {
    let w = b.get("weight", &[channels], Init::Ones)?;
    let bias = b.get("bias", &[channels], Init::Zeros)?;
    Ok(GroupNorm::new(w, bias, channels, groups.min(channels), 1e-5)?)
}

/// `softmax(q k^T / sqrt(d)) v` over the last two dims.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)? as f64;
    let scores = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? / d.sqrt())?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(weights.matmul(&v.contiguous()?)?)
}

/// Sinusoidal embedding, `[n] -> [n, dim]` (sin half then cos half).
pub fn sinusoidal(positions: &[f64], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data.extend((0..half).map(|i| (p * freq(i)).sin()));
        data.extend((0..half).map(|i| (p * freq(i)).cos()));
        data.extend(std::iter::repeat(0.0).take(dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

/// Timestep MLP: sinusoid -> linear -> SiLU -> linear.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freq_dim: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(b: &mut Builder, freq_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            freq_dim,
            lin1: linear(&mut b.pp("lin1"), freq_dim, dim, false)?,
            lin2: linear(&mut b.pp("lin2"), dim, dim, false)?,
        })
    }

    /// One embedding row per timestep.
    pub fn forward(&self, timesteps: &[usize], like: &Tensor) -> Result<Tensor> {
        let pos: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let e = sinusoidal(&pos, self.freq_dim, like)?;
        Ok(self.lin2.forward(&self.lin1.forward(&e)?.silu()?)?)
    }
}

/// Pre-norm residual block with multiplicative timestep modulation.
///
/// Modulation is `h * (1 + proj(temb))`, so an all-zero input with zero biases stays zero.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&mut b.pp("norm1"), cin, groups)?,
            conv1: conv(&mut b.pp("conv1"), cin, cout, 3, 1, false)?,
            temb: linear(&mut b.pp("temb"), time_dim, cout, false)?,
            norm2: group_norm(&mut b.pp("norm2"), cout, groups)?,
            conv2: conv(&mut b.pp("conv2"), cout, cout, 3, 1, false)?,
            skip: if cin != cout {
                Some(conv(&mut b.pp("skip"), cin, cout, 1, 1, false)?)
            } else {
                None
            },
        })
    }

    /// `x: [f, c, h, w]`, `temb: [f, time_dim]`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let scale = self.temb.forward(&temb.silu()?)?;
        let (f, c) = scale.dims2()?;
        let h = h.broadcast_mul(&(scale.reshape((f, c, 1, 1))? + 1.0)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (f, c, h, w) = x.dims4()?;
    Ok(x.reshape((f, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn from_tokens(t: &Tensor, shape: (usize, usize, usize, usize)) -> Result<Tensor> {
    Ok(t.transpose(1, 2)?.contiguous()?.reshape(shape)?)
}

/// Self-attention over the spatial positions of each frame.
#[derive(Debug, Clone)]
pub struct SpatialSelfAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl SpatialSelfAttention {
    pub fn new(b: &mut Builder, c: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: group_norm(&mut b.pp("norm"), c, groups)?,
            q: linear(&mut b.pp("q"), c, c, false)?,
            k: linear(&mut b.pp("k"), c, c, false)?,
            v: linear(&mut b.pp("v"), c, c, false)?,
            out: linear(&mut b.pp("out"), c, c, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tokens = to_tokens(&self.norm.forward(x)?)?;
        let a = attention(
            &self.q.forward(&tokens)?,
            &self.k.forward(&tokens)?,
            &self.v.forward(&tokens)?,
        )?;
        Ok((x + from_tokens(&self.out.forward(&a)?, x.dims4()?)?)?)
    }
}

/// Cross-attention from spatial tokens to a context sequence `[1, l, d]`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    pub fn new(b: &mut Builder, c: usize, context_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: group_norm(&mut b.pp("norm"), c, groups)?,
            q: linear(&mut b.pp("q"), c, c, false)?,
            k: linear(&mut b.pp("k"), context_dim, c, false)?,
            v: linear(&mut b.pp("v"), context_dim, c, false)?,
            out: linear(&mut b.pp("out"), c, c, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (f, _, _, _) = x.dims4()?;
        let tokens = to_tokens(&self.norm.forward(x)?)?;
        let (_, l, d) = context.dims3()?;
        let ctx = context.broadcast_as((f, l, d))?.contiguous()?;
        let a = attention(&self.q.forward(&tokens)?, &self.k.forward(&ctx)?, &self.v.forward(&ctx)?)?;
        Ok((x + from_tokens(&self.out.forward(&a)?, x.dims4()?)?)?)
    }
}

/// Attention across the frame axis, independently at each spatial location.
///
/// Frame-position encodings (when enabled) enter the query and key inputs only,
/// and the output projection starts at zero so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    channels: usize,
    pub position_encoding: bool,
}

impl TemporalAttention {
    pub fn new(b: &mut Builder, c: usize, position_encoding: bool) -> Result<Self> {
        Ok(Self {
            q: linear(&mut b.pp("q"), c, c, false)?,
            k: linear(&mut b.pp("k"), c, c, false)?,
            v: linear(&mut b.pp("v"), c, c, false)?,
            out: linear(&mut b.pp("out"), c, c, true)?,
            channels: c,
            position_encoding,
        })
    }

    /// `x: [f, c, h, w]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (f, c, h, w) = x.dims4()?;
        // [h*w, f, c]
        let tokens = x.permute((2, 3, 0, 1))?.contiguous()?.reshape((h * w, f, c))?;
        let qk_in = if self.position_encoding {
            let pos: Vec<f64> = (0..f).map(|i| i as f64).collect();
            tokens.broadcast_add(&sinusoidal(&pos, self.channels, x)?)?
        } else {
            tokens.clone()
        };
        let a = attention(
            &self.q.forward(&qk_in)?,
            &self.k.forward(&qk_in)?,
            &self.v.forward(&tokens)?,
        )?;
        let y = (tokens + self.out.forward(&a)?)?;
        Ok(y.reshape((h, w, f, c))?.permute((2, 3, 0, 1))?.contiguous()?)
    }

    /// The value/output path alone, which the block reduces to for one frame.
    pub fn value_path(&self, x: &Tensor) -> Result<Tensor> {
        let (f, c, h, w) = x.dims4()?;
        let tokens = x.permute((2, 3, 0, 1))?.contiguous()?.reshape((h * w, f, c))?;
        let y = (&tokens + self.out.forward(&self.v.forward(&tokens)?)?)?;
        Ok(y.reshape((h, w, f, c))?.permute((2, 3, 0, 1))?.contiguous()?)
    }
}

/// Zero-initialized 1x1 projection that adds a branch feature into a UNet level.
#[derive(Debug, Clone)]
pub struct FusionProjection {
    proj: Conv2d,
}

impl FusionProjection {
    pub fn new(b: &mut Builder, c: usize) -> Result<Self> {
        Ok(Self {
            proj: conv(b, c, c, 1, 1, true)?,
        })
    }

    pub fn forward(&self, h: &Tensor, branch: &Tensor) -> Result<Tensor> {
        Ok((h + self.proj.forward(branch)?)?)
    }
}

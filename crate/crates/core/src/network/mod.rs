//! The denoising UNet and its masked-image conditioning branch.
//!
//! The branch mirrors the UNet's down path; its per-level features enter the
//! UNet through zero-initialized 1x1 projections. Each UNet level runs a
//! residual block, spatial self-attention, cross-attention to a learned null
//! context and temporal attention across frames.

pub mod blocks;
pub mod params;

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, GroupNorm};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use blocks::{
    conv, group_norm, CrossAttention, FusionProjection, ResBlock, SpatialSelfAttention,
    TemporalAttention, TimeEmbedding,
};
pub use params::{Builder, Init, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub latent_channels: usize,
    pub cond_channels: usize,
    pub base_width: usize,
    pub width_mult: Vec<usize>,
    pub groups: usize,
    pub time_freq_dim: usize,
    pub time_dim: usize,
    pub null_tokens: usize,
    pub context_dim: usize,
    pub temporal_position_encoding: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            cond_channels: 9,
            base_width: 32,
            width_mult: vec![1, 2, 2],
            groups: 8,
            time_freq_dim: 32,
            time_dim: 128,
            null_tokens: 4,
            context_dim: 64,
            temporal_position_encoding: true,
        }
    }
}

impl NetConfig {
    /// A narrow variant for fast tests; same topology.
    pub fn tiny() -> Self {
        Self {
            base_width: 8,
            width_mult: vec![1, 2, 2],
            groups: 4,
            time_freq_dim: 8,
            time_dim: 16,
            context_dim: 8,
            ..Self::default()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.width_mult.iter().map(|m| m * self.base_width).collect()
    }

    pub fn n_levels(&self) -> usize {
        self.width_mult.len()
    }

    /// Spatial sizes are padded to a multiple of this inside the network.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.n_levels() - 1)
    }
}

/// Per-level conditioning features, one `[f, c_l, h_l, w_l]` array per UNet level.
#[derive(Debug, Clone)]
pub struct BranchFeatures {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    self_attn: SpatialSelfAttention,
    cross_attn: CrossAttention,
    temporal: TemporalAttention,
    fusion: FusionProjection,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct BranchLevel {
    res: ResBlock,
    down: Option<Conv2d>,
}

/// Denoiser modules resolved against a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: NetConfig,
    time: TimeEmbedding,
    conv_in: Conv2d,
    levels: Vec<Level>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    null_text: Tensor,
    branch_time: TimeEmbedding,
    branch_in: Conv2d,
    branch_levels: Vec<BranchLevel>,
}

/// Which temporal path the forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalMode {
    /// Temporal attention after self- and cross-attention.
    Enabled,
    /// Motion modules skipped (per-frame spatial model).
    Disabled,
    /// Temporal attention replaced by its value/output path only.
    ValuePath,
}

impl Denoiser {
    /// Resolves (creating on first use) every parameter of the network.
    pub fn build(store: &mut ParamStore, config: &NetConfig, trainable: &[ParamGroup]) -> Result<Self> {
        if config.n_levels() == 0 {
            return Err(Error::config("network needs at least one level"));
        }
        let widths = config.widths();
        let g = config.groups;
        let td = config.time_dim;
        let mut root = store.builder(trainable);

        let mut sp = root.pp("spatial");
        let time = TimeEmbedding::new(&mut sp.pp("time"), config.time_freq_dim, td)?;
        let conv_in = conv(&mut sp.pp("conv_in"), config.latent_channels, widths[0], 3, 1, false)?;
        let mut level_parts = Vec::new();
        let mut c_prev = widths[0];
        for (l, &c) in widths.iter().enumerate() {
            let mut down_b = sp.pp("down");
            let mut lb = down_b.pp(l);
            let res = ResBlock::new(&mut lb.pp("res"), c_prev, c, td, g)?;
            let self_attn = SpatialSelfAttention::new(&mut lb.pp("self_attn"), c, g)?;
            let cross_attn = CrossAttention::new(&mut lb.pp("cross_attn"), c, config.context_dim, g)?;
            let down = if l + 1 < widths.len() {
                Some(conv(&mut lb.pp("downsample"), c, c, 3, 2, false)?)
            } else {
                None
            };
            level_parts.push((res, self_attn, cross_attn, down));
            c_prev = c;
        }
        let mid = ResBlock::new(&mut sp.pp("mid"), c_prev, c_prev, td, g)?;
        let mut up = Vec::new();
        let mut c_cur = c_prev;
        for (l, &c) in widths.iter().enumerate().rev() {
            up.push(ResBlock::new(&mut sp.pp("up").pp(l), c_cur + c, c, td, g)?);
            c_cur = c;
        }
        up.reverse();
        let out_norm = group_norm(&mut sp.pp("out_norm"), widths[0], g)?;
        let out_conv = conv(&mut sp.pp("out_conv"), widths[0], config.latent_channels, 3, 1, false)?;

        let mut levels = Vec::new();
        for (l, (res, self_attn, cross_attn, down)) in level_parts.into_iter().enumerate() {
            let c = widths[l];
            let temporal = TemporalAttention::new(
                &mut root.pp("motion").pp("down").pp(l),
                c,
                config.temporal_position_encoding,
            )?;
            let fusion = FusionProjection::new(&mut root.pp("fusion").pp(l), c)?;
            levels.push(Level {
                res,
                self_attn,
                cross_attn,
                temporal,
                fusion,
                down,
            });
        }

        let null_text = root
            .pp("null_text")
            .get("embedding", &[config.null_tokens, config.context_dim], Init::Normal(1.0))?;

        let mut br = root.pp("branch");
        let branch_time = TimeEmbedding::new(&mut br.pp("time"), config.time_freq_dim, td)?;
        let branch_in = conv(&mut br.pp("conv_in"), config.cond_channels, widths[0], 3, 1, false)?;
        let mut branch_levels = Vec::new();
        let mut c_prev = widths[0];
        for (l, &c) in widths.iter().enumerate() {
            let mut down_b = br.pp("down");
            let mut lb = down_b.pp(l);
            let res = ResBlock::new(&mut lb.pp("res"), c_prev, c, td, g)?;
            let down = if l + 1 < widths.len() {
                Some(conv(&mut lb.pp("downsample"), c, c, 3, 2, false)?)
            } else {
                None
            };
            branch_levels.push(BranchLevel { res, down });
            c_prev = c;
        }

        Ok(Self {
            config: config.clone(),
            time,
            conv_in,
            levels,
            mid,
            up,
            out_norm,
            out_conv,
            null_text,
            branch_time,
            branch_in,
            branch_levels,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Expands a single timestep to every frame, or checks one per frame.
    fn per_frame(&self, timesteps: &[usize], f: usize) -> Result<Vec<usize>> {
        match timesteps.len() {
            1 => Ok(vec![timesteps[0]; f]),
            n if n == f => Ok(timesteps.to_vec()),
            n => Err(Error::shape(format!("{n} timesteps for {f} frames"))),
        }
    }

    fn pad(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (_, _, h, w) = x.dims4()?;
        let m = self.config.spatial_multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut x = x.clone();
        if hp > h {
            x = x.pad_with_same(2, 0, hp - h)?;
        }
        if wp > w {
            x = x.pad_with_same(3, 0, wp - w)?;
        }
        Ok((x, h, w))
    }

    /// Feature shapes `[f, c_l, h_l, w_l]` for a latent of spatial size `h x w`.
    pub fn level_shapes(&self, f: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
        let m = self.config.spatial_multiple();
        let (mut hp, mut wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut out = Vec::new();
        for (l, c) in self.config.widths().into_iter().enumerate() {
            out.push([f, c, hp, wp]);
            if l + 1 < self.config.n_levels() {
                hp = hp.div_ceil(2);
                wp = wp.div_ceil(2);
            }
        }
        out
    }

    /// Conditioning branch over the 9-channel input `[f, 9, h, w]`.
    pub fn brushnet_forward(&self, cond: &Tensor, timesteps: &[usize]) -> Result<BranchFeatures> {
        let (f, c, _, _) = cond.dims4()?;
        if c != self.config.cond_channels {
            return Err(Error::shape(format!(
                "conditioning has {c} channels, expected {}",
                self.config.cond_channels
            )));
        }
        let ts = self.per_frame(timesteps, f)?;
        let (x, _, _) = self.pad(cond)?;
        let temb = self.branch_time.forward(&ts, &x)?;
        let mut h = self.branch_in.forward(&x)?;
        let mut levels = Vec::with_capacity(self.branch_levels.len());
        for lvl in &self.branch_levels {
            h = lvl.res.forward(&h, &temb)?;
            levels.push(h.clone());
            if let Some(d) = &lvl.down {
                h = d.forward(&h)?;
            }
        }
        Ok(BranchFeatures { levels })
    }

    /// Epsilon prediction for `noisy: [f, 4, h, w]`.
    pub fn forward(
        &self,
        noisy: &Tensor,
        timesteps: &[usize],
        branch: Option<&BranchFeatures>,
        temporal: TemporalMode,
    ) -> Result<Tensor> {
        let (f, c, _, _) = noisy.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::shape(format!(
                "noisy latent has {c} channels, expected {}",
                self.config.latent_channels
            )));
        }
        let ts = self.per_frame(timesteps, f)?;
        let (x, h0, w0) = self.pad(noisy)?;
        if let Some(b) = branch {
            let expected = self.level_shapes(f, x.dim(2)?, x.dim(3)?);
            let got: Vec<[usize; 4]> = b
                .levels
                .iter()
                .map(|t| t.dims4().map(|(a, b, c, d)| [a, b, c, d]))
                .collect::<candle_core::Result<_>>()?;
            if got != expected {
                return Err(Error::shape(format!(
                    "branch features {got:?} do not match levels {expected:?}"
                )));
            }
        }
        let temb = self.time.forward(&ts, &x)?;
        let context = self.null_text.unsqueeze(0)?;
        let mut h = self.conv_in.forward(&x)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for (l, lvl) in self.levels.iter().enumerate() {
            h = lvl.res.forward(&h, &temb)?;
            h = lvl.self_attn.forward(&h)?;
            h = lvl.cross_attn.forward(&h, &context)?;
            h = match temporal {
                TemporalMode::Enabled => lvl.temporal.forward(&h)?,
                TemporalMode::ValuePath => lvl.temporal.value_path(&h)?,
                TemporalMode::Disabled => h,
            };
            if let Some(b) = branch {
                h = lvl.fusion.forward(&h, &b.levels[l])?;
            }
            skips.push(h.clone());
            if let Some(d) = &lvl.down {
                h = d.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        for l in (0..self.levels.len()).rev() {
            let skip = &skips[l];
            let (_, _, sh, sw) = skip.dims4()?;
            if h.dim(2)? != sh || h.dim(3)? != sw {
                h = h.upsample_nearest2d(sh, sw)?;
            }
            h = self.up[l].forward(&Tensor::cat(&[&h, skip], 1)?, &temb)?;
        }
        let out = self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)?;
        Ok(out.narrow(2, 0, h0)?.narrow(3, 0, w0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    fn tiny(dtype: DType) -> (ParamStore, Denoiser) {
        let mut store = ParamStore::new(dtype, 3);
        let net = Denoiser::build(&mut store, &NetConfig::tiny(), &[]).unwrap();
        (store, net)
    }

    #[test]
    fn branch_levels_match_unet_levels() {
        let (_, net) = tiny(DType::F32);
        let cond = randn(&[2, 9, 8, 8], 1, DType::F32);
        let feats = net.brushnet_forward(&cond, &[500]).unwrap();
        assert_eq!(feats.levels.len(), 3);
        let shapes: Vec<[usize; 4]> = feats.levels.iter().map(|t| {
            let (a, b, c, d) = t.dims4().unwrap();
            [a, b, c, d]
        }).collect();
        assert_eq!(shapes, net.level_shapes(2, 8, 8));

        let cond4 = randn(&[4, 9, 8, 8], 1, DType::F32);
        let feats4 = net.brushnet_forward(&cond4, &[500]).unwrap();
        for (a, b) in feats.levels.iter().zip(&feats4.levels) {
            assert_eq!(b.dim(0).unwrap(), 2 * a.dim(0).unwrap());
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let (mut store, _) = tiny(DType::F64);
        store.zero_biases().unwrap();
        let net = Denoiser::build(&mut store, &NetConfig::tiny(), &[]).unwrap();
        let cond = Tensor::zeros((2, 9, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let feats = net.brushnet_forward(&cond, &[700]).unwrap();
        assert!(feats.levels.iter().all(|l| values(l).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn branch_rejects_wrong_channels() {
        let (_, net) = tiny(DType::F32);
        let cond = randn(&[1, 8, 8, 8], 1, DType::F32);
        assert!(matches!(net.brushnet_forward(&cond, &[1]), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_fusion_ignores_branch() {
        let (_, net) = tiny(DType::F32);
        let noisy = randn(&[3, 4, 8, 8], 2, DType::F32);
        let cond = randn(&[3, 9, 8, 8], 3, DType::F32);
        let feats = net.brushnet_forward(&cond, &[321]).unwrap();
        let with = net.forward(&noisy, &[321], Some(&feats), TemporalMode::Enabled).unwrap();
        let without = net.forward(&noisy, &[321], None, TemporalMode::Enabled).unwrap();
        assert_eq!(values(&with), values(&without));
        assert_eq!(with.dims(), noisy.dims());
    }

    #[test]
    fn single_frame_temporal_is_value_path() {
        let (mut store, _) = tiny(DType::F64);
        // make the motion output projections non-zero so the check is not vacuous
        let names: Vec<String> = store.names().filter(|n| n.starts_with("motion.")).map(String::from).collect();
        for (i, n) in names.iter().enumerate() {
            let v = store.get(n).unwrap();
            let t = (randn(v.dims(), 100 + i as u64, DType::F64) * 0.1).unwrap();
            store.insert(n.clone(), t).unwrap();
        }
        let net = Denoiser::build(&mut store, &NetConfig::tiny(), &[]).unwrap();
        let noisy = randn(&[1, 4, 8, 8], 4, DType::F64);
        let a = net.forward(&noisy, &[10], None, TemporalMode::Enabled).unwrap();
        let b = net.forward(&noisy, &[10], None, TemporalMode::ValuePath).unwrap();
        let err = values(&a).iter().zip(values(&b)).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err < 1e-12, "{err}");
        let c = net.forward(&noisy, &[10], None, TemporalMode::Disabled).unwrap();
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn odd_latent_sizes_are_padded_and_cropped() {
        let (_, net) = tiny(DType::F32);
        let noisy = randn(&[2, 4, 6, 10], 5, DType::F32);
        let out = net.forward(&noisy, &[1, 2], None, TemporalMode::Enabled).unwrap();
        assert_eq!(out.dims(), &[2, 4, 6, 10]);
    }

    #[test]
    fn forward_is_deterministic() {
        let (_, net) = tiny(DType::F32);
        let noisy = randn(&[2, 4, 8, 8], 6, DType::F32);
        let a = net.forward(&noisy, &[900], None, TemporalMode::Enabled).unwrap();
        let b = net.forward(&noisy, &[900], None, TemporalMode::Enabled).unwrap();
        assert_eq!(values(&a), values(&b));
    }
}

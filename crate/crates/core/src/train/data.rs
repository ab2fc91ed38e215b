//! Synthetic training videos: drifting smooth gradients with soft moving sprites,
//! and static benchmark scenes with per-frame sensor noise.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::video::VideoFrames;

#[derive(Debug, Clone, Copy)]
struct Sprite {
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
    radius: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone)]
struct Scene {
    base: [f64; 3],
    grad: [[f64; 2]; 3],
    drift: [f64; 2],
    wave: [f64; 3],
    freq: [f64; 2],
    sprites: Vec<Sprite>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let sprite = |rng: &mut ChaCha8Rng| Sprite {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            vy: rng.gen_range(-1.0..1.0),
            vx: rng.gen_range(-1.0..1.0),
            radius: rng.gen_range(0.12..0.3) * h.min(w) as f64,
            color: [rng.gen(), rng.gen(), rng.gen()],
        };
        let n_sprites = rng.gen_range(1..=3);
        Self {
            base: [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)],
            grad: [
                [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
                [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
                [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
            ],
            drift: [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)],
            wave: [rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1)],
            freq: [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)],
            sprites: (0..n_sprites).map(|_| sprite(rng)).collect(),
        }
    }

    fn pixel(&self, i: f64, c: usize, y: f64, x: f64, h: f64, w: f64) -> f64 {
        let (u, v) = (y / h - 0.5 + self.drift[0] * i, x / w - 0.5 + self.drift[1] * i);
        let tau = std::f64::consts::TAU;
        let mut val = self.base[c]
            + self.grad[c][0] * u
            + self.grad[c][1] * v
            + self.wave[c] * (tau * (self.freq[0] * u + self.freq[1] * v)).sin();
        for s in &self.sprites {
            let (sy, sx) = (s.cy + s.vy * i, s.cx + s.vx * i);
            let d2 = (y - sy).powi(2) + (x - sx).powi(2);
            let alpha = (-d2 / (2.0 * s.radius * s.radius)).exp();
            val = val * (1.0 - alpha) + s.color[c] * alpha;
        }
        val.clamp(0.0, 1.0)
    }
}

/// A video of smooth drifting gradients with soft Gaussian sprites moving linearly.
pub fn synthetic_video(h: usize, w: usize, f: usize, seed: u64) -> Result<VideoFrames> {
    if f == 0 {
        return Err(Error::invalid("video needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng, h, w);
    let (hf, wf) = (h as f64, w as f64);
    VideoFrames::new(Array4::from_shape_fn((f, 3, h, w), |(i, c, y, x)| {
        scene.pixel(i as f64, c, y as f64 + 0.5, x as f64 + 0.5, hf, wf)
    }))
}

/// A static scene repeated over `f` frames plus independent Gaussian noise of `noise_std` per frame.
pub fn static_scene(h: usize, w: usize, f: usize, noise_std: f64, seed: u64) -> Result<VideoFrames> {
    if f == 0 {
        return Err(Error::invalid("video needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng, h, w);
    let (hf, wf) = (h as f64, w as f64);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let frame = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| scene.pixel(0.0, c, y as f64 + 0.5, x as f64 + 0.5, hf, wf));
    let mut data = Array4::zeros((f, 3, h, w));
    for ((_, c, y, x), v) in data.indexed_iter_mut() {
        *v = (frame[[0, c, y, x]] + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    VideoFrames::new(data)
}

/// `n` synthetic videos with consecutive seeds.
pub fn synthetic_corpus(n: usize, h: usize, w: usize, f: usize, seed: u64) -> Result<Vec<VideoFrames>> {
    (0..n as u64).map(|k| synthetic_video(h, w, f, seed.wrapping_add(k))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_video(16, 24, 4, 9).unwrap();
        let b = synthetic_video(16, 24, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data().dim(), (4, 3, 16, 24));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn frames_move() {
        let v = synthetic_video(16, 16, 3, 1).unwrap();
        let d = &v.data().index_axis(ndarray::Axis(0), 0) - &v.data().index_axis(ndarray::Axis(0), 2);
        assert!(d.iter().any(|x| x.abs() > 1e-3));
    }

    #[test]
    fn static_scene_without_noise_is_static() {
        let v = static_scene(16, 16, 3, 0.0, 2).unwrap();
        let d = &v.data().index_axis(ndarray::Axis(0), 0) - &v.data().index_axis(ndarray::Axis(0), 2);
        assert!(d.iter().all(|&x| x == 0.0));
    }
}

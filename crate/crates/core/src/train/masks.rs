//! Moving free-form mask sequences for training.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::MaskSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskShape {
    Rectangle,
    Ellipse,
    Stroke,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskGenConfig {
    /// Target area fraction of frame 0.
    pub rate: f64,
    /// Drift direction in degrees (0 = +x, 90 = +y).
    pub direction: f64,
    pub shape: MaskShape,
    pub seed: u64,
    /// Drift speed in pixels per frame.
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Standard deviation of the per-frame displacement jitter, in pixels.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_speed() -> f64 {
    1.5
}

fn default_jitter() -> f64 {
    0.5
}

impl MaskGenConfig {
    pub fn new(rate: f64, direction: f64, shape: MaskShape, seed: u64) -> Self {
        Self {
            rate,
            direction,
            shape,
            seed,
            speed: default_speed(),
            jitter: default_jitter(),
        }
    }

    /// Random rate in `[0.1, 0.5]`, direction and shape, all drawn from `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_3a5c);
        let shape = [MaskShape::Rectangle, MaskShape::Ellipse, MaskShape::Stroke][rng.gen_range(0..3)];
        Self::new(rng.gen_range(0.1..0.5), rng.gen_range(0.0..360.0), shape, seed)
    }
}

/// Frame-0 shape drawn with area close to `rate`, translated along `direction`
/// with per-frame jitter, bouncing off the frame borders.
pub fn generate_mask_sequence(h: usize, w: usize, f: usize, cfg: &MaskGenConfig) -> Result<MaskSequence> {
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(Error::invalid(format!("mask rate {} outside [0, 1]", cfg.rate)));
    }
    if f == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("mask sequence needs f, h, w >= 1"));
    }
    if cfg.rate == 0.0 {
        return Ok(MaskSequence::zeros(f, h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = match cfg.shape {
        MaskShape::Rectangle => rectangle(h, w, cfg.rate, &mut rng),
        MaskShape::Ellipse => ellipse(h, w, cfg.rate, &mut rng),
        MaskShape::Stroke => stroke(h, w, cfg.rate, &mut rng),
    };
    let (y0, y1, x0, x1) = bbox(&base, h, w);
    // allowed shift range keeping the bounding box inside the frame
    let (lo_y, hi_y) = (-(y0 as f64), (h - 1 - y1) as f64);
    let (lo_x, hi_x) = (-(x0 as f64), (w - 1 - x1) as f64);
    let theta = cfg.direction.to_radians();
    let (mut vy, mut vx) = (cfg.speed * theta.sin(), cfg.speed * theta.cos());
    let jitter = Normal::new(0.0, cfg.jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let (mut sy, mut sx) = (0.0f64, 0.0f64);
    let mut data = Array4::zeros((f, 1, h, w));
    for i in 0..f {
        if i > 0 {
            sy += vy + jitter.sample(&mut rng);
            sx += vx + jitter.sample(&mut rng);
            (sy, vy) = bounce(sy, vy, lo_y, hi_y);
            (sx, vx) = bounce(sx, vx, lo_x, hi_x);
        }
        let (dy, dx) = (sy.round() as isize, sx.round() as isize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if base[y * w + x] {
                    let (ty, tx) = (y as isize + dy, x as isize + dx);
                    if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                        data[[i, 0, ty as usize, tx as usize]] = 1.0;
                    }
                }
            }
        }
    }
    MaskSequence::new(data)
}

fn bounce(mut s: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo.max(hi.min(0.0)), v);
    }
    for _ in 0..4 {
        if s < lo {
            s = 2.0 * lo - s;
            v = -v;
        } else if s > hi {
            s = 2.0 * hi - s;
            v = -v;
        } else {
            break;
        }
    }
    (s.clamp(lo, hi), v)
}

fn bbox(base: &[bool], h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if base[y * w + x] {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 > y1 {
        (0, 0, 0, 0)
    } else {
        (y0, y1, x0, x1)
    }
}

fn rectangle(h: usize, w: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let area = rate * (h * w) as f64;
    let aspect: f64 = rng.gen_range(0.5f64..2.0);
    let mut rw = (area * aspect).sqrt();
    let mut rh = area / rw;
    if rw > w as f64 {
        rw = w as f64;
        rh = area / rw;
    }
    if rh > h as f64 {
        rh = h as f64;
        rw = (area / rh).min(w as f64);
    }
    let (rh, rw) = ((rh.round() as usize).clamp(1, h), (rw.round() as usize).clamp(1, w));
    let top = rng.gen_range(0..=h - rh);
    let left = rng.gen_range(0..=w - rw);
    (0..h * w)
        .map(|k| {
            let (y, x) = (k / w, k % w);
            (top..top + rh).contains(&y) && (left..left + rw).contains(&x)
        })
        .collect()
}

fn ellipse(h: usize, w: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let area = rate * (h * w) as f64;
    let aspect: f64 = rng.gen_range(0.5f64..2.0);
    let mut a = (area * aspect / std::f64::consts::PI).sqrt(); // x semi-axis
    let mut b = area / (std::f64::consts::PI * a);
    let (max_a, max_b) = (w as f64 / 2.0, h as f64 / 2.0);
    if a > max_a {
        a = max_a;
        b = area / (std::f64::consts::PI * a);
    }
    if b > max_b {
        b = max_b;
        a = (area / (std::f64::consts::PI * b)).min(max_a);
    }
    let cy = rng.gen_range(b.min(max_b)..=(h as f64 - b).max(max_b));
    let cx = rng.gen_range(a.min(max_a)..=(w as f64 - a).max(max_a));
    (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as f64 + 0.5, (k % w) as f64 + 0.5);
            ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0
        })
        .collect()
}

/// Thick random-walk polyline, extended until the covered area reaches `rate`.
fn stroke(h: usize, w: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let target = (rate * (h * w) as f64).round().max(1.0) as usize;
    let radius = (h.min(w) as f64 * 0.06).max(1.0);
    let seg = radius * 3.0;
    let mut base = vec![false; h * w];
    let mut covered = 0usize;
    let (mut py, mut px) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let max_segments = 64 * (h + w);
    for _ in 0..max_segments {
        if covered >= target {
            break;
        }
        heading += rng.gen_range(-1.0..1.0);
        let (mut ny, mut nx) = (py + seg * heading.sin(), px + seg * heading.cos());
        if !(0.0..h as f64).contains(&ny) || !(0.0..w as f64).contains(&nx) {
            heading += std::f64::consts::PI;
            ny = ny.clamp(0.0, h as f64 - 1.0);
            nx = nx.clamp(0.0, w as f64 - 1.0);
        }
        let (y_lo, y_hi) = ((py.min(ny) - radius).floor().max(0.0) as usize, (py.max(ny) + radius).ceil().min(h as f64 - 1.0) as usize);
        let (x_lo, x_hi) = ((px.min(nx) - radius).floor().max(0.0) as usize, (px.max(nx) + radius).ceil().min(w as f64 - 1.0) as usize);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let k = y * w + x;
                if !base[k] && segment_distance((y as f64 + 0.5, x as f64 + 0.5), (py, px), (ny, nx)) <= radius {
                    base[k] = true;
                    covered += 1;
                    if covered >= target {
                        return base;
                    }
                }
            }
        }
        (py, px) = (ny, nx);
    }
    base
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dy).powi(2) + (p.1 - a.1 - t * dx).powi(2)).sqrt()
}

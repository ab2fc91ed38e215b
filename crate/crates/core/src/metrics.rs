//! Masked-region PSNR and temporal stability.

use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{MaskSequence, VideoFrames};

/// PSNR reported for a perfect match.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrReport {
    /// `None` for frames without masked pixels.
    pub per_frame: Vec<Option<f64>>,
    /// Mean over frames with masked pixels.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_in_mask: PsnrReport,
    /// Mean absolute inter-frame difference inside the union of all masks.
    pub temporal_stability: f64,
    pub runtime_seconds: f64,
}

/// PSNR in dB for a mean squared error on `[0, 1]` data, capped at [`PSNR_CAP`].
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

fn cropped(frames: &VideoFrames, masks: &MaskSequence) -> (Array4<f64>, Array4<f64>) {
    let (h, w) = frames.original_size;
    (
        frames.data().slice(s![.., .., ..h, ..w]).to_owned(),
        masks.data().slice(s![.., .., ..h, ..w]).to_owned(),
    )
}

/// Mean absolute difference between consecutive frames inside the mask union.
pub fn temporal_stability(frames: &Array4<f64>, masks: &Array4<f64>) -> f64 {
    let (f, c, h, w) = frames.dim();
    if f < 2 {
        return 0.0;
    }
    let union: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| (0..f).any(|i| masks[[i, 0, y, x]] > 0.5))
        .collect();
    if union.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 1..f {
        let mut acc = 0.0;
        for &(y, x) in &union {
            for ch in 0..c {
                acc += (frames[[i, ch, y, x]] - frames[[i - 1, ch, y, x]]).abs();
            }
        }
        total += acc / (union.len() * c) as f64;
    }
    total / (f - 1) as f64
}

/// Evaluates `output` against `ground_truth` over the masked pixels of the unpadded frame area.
pub fn compute_metrics(
    output: &VideoFrames,
    ground_truth: &VideoFrames,
    masks: &MaskSequence,
    runtime_seconds: f64,
) -> Result<EvalReport> {
    if output.data().dim() != ground_truth.data().dim() {
        return Err(Error::shape(format!(
            "output {:?} vs ground truth {:?}",
            output.data().dim(),
            ground_truth.data().dim()
        )));
    }
    crate::video::check_aligned(output, masks)?;
    let (out, m) = cropped(output, masks);
    let (gt, _) = cropped(ground_truth, masks);
    let (f, c, h, w) = out.dim();
    let mut per_frame = Vec::with_capacity(f);
    for i in 0..f {
        let mut se = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if m[[i, 0, y, x]] > 0.5 {
                    for ch in 0..c {
                        se += (out[[i, ch, y, x]] - gt[[i, ch, y, x]]).powi(2);
                    }
                    n += c;
                }
            }
        }
        per_frame.push((n > 0).then(|| psnr(se / n as f64)));
    }
    let valid: Vec<f64> = per_frame.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        PSNR_CAP
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(EvalReport {
        psnr_in_mask: PsnrReport { per_frame, mean },
        temporal_stability: temporal_stability(&out, &m),
        runtime_seconds,
    })
}

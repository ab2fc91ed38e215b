//! Pixel-space video and mask stacks, frame-directory IO and output compositing.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial dimensions after ingestion are padded up to a multiple of this.
pub const SPATIAL_MULTIPLE: usize = 8;
/// Smallest padded spatial extent.
pub const MIN_EXTENT: usize = 16;
pub const META_FILE: &str = "meta.json";

/// Dense RGB frame stack, layout `[f, 3, h, w]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    data: Array4<f64>,
    pub fps: Option<f64>,
    /// `(height, width)` before ingestion padding.
    pub original_size: (usize, usize),
}

/// Binary masks, layout `[f, 1, h, w]`, 1 = to be completed.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    data: Array4<f64>,
}

/// Sidecar metadata stored next to a frame directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameMeta {
    pub fps: Option<f64>,
    pub width: usize,
    pub height: usize,
}

impl VideoFrames {
    /// Wraps an array whose spatial size is already valid; `original_size` is the full size.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (f, c, h, w) = data.dim();
        if f == 0 {
            return Err(Error::shape("video has no frames"));
        }
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame values must lie in [0, 1]"));
        }
        Ok(Self {
            data,
            fps: None,
            original_size: (h, w),
        })
    }

    /// Pads to the ingestion grid with reflection and records the original size.
    pub fn from_unpadded(data: Array4<f64>) -> Result<Self> {
        let (_, _, h, w) = data.dim();
        let mut v = Self::new(reflect_pad(&data, padded_extent(h), padded_extent(w)))?;
        v.original_size = (h, w);
        Ok(v)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// Frames at the given indices, keeping metadata.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
            fps: self.fps,
            original_size: self.original_size,
        }
    }

    /// Replaces the data, keeping metadata. Values are clipped to `[0, 1]`.
    pub fn with_data(&self, mut data: Array4<f64>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::shape(format!(
                "replacement data {:?} does not match {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(Self {
            data,
            fps: self.fps,
            original_size: self.original_size,
        })
    }

    /// Frames multiplied by `1 - mask`.
    pub fn masked(&self, masks: &MaskSequence) -> Result<Self> {
        check_aligned(self, masks)?;
        let mut data = self.data.clone();
        let keep = masks.data.mapv(|m| 1.0 - m);
        data *= &keep;
        self.with_data(data)
    }
}

impl MaskSequence {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (f, c, _, _) = data.dim();
        if f == 0 || c != 1 {
            return Err(Error::shape(format!("mask shape {:?} is not [f,1,h,w]", data.dim())));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask values must be exactly 0 or 1"));
        }
        Ok(Self { data })
    }

    pub fn zeros(f: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array4::zeros((f, 1, h, w)),
        }
    }

    /// Binarizes at 0.5 and pads to the ingestion grid.
    pub fn from_unpadded_gray(gray: Array4<f64>) -> Result<Self> {
        let (_, _, h, w) = gray.dim();
        let bin = gray.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        Self::new(reflect_pad(&bin, padded_extent(h), padded_extent(w)))
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (f, _, h, w) = self.data.dim();
        (f, h, w)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
        }
    }

    /// Fraction of masked pixels in frame `i`.
    pub fn coverage(&self, i: usize) -> f64 {
        let frame = self.data.index_axis(Axis(0), i);
        frame.sum() / frame.len() as f64
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

pub(crate) fn check_aligned(frames: &VideoFrames, masks: &MaskSequence) -> Result<()> {
    let (f, _, h, w) = frames.data.dim();
    if masks.dims() != (f, h, w) {
        return Err(Error::shape(format!(
            "frames [f={f}, h={h}, w={w}] and masks {:?} are not aligned",
            masks.dims()
        )));
    }
    Ok(())
}

fn padded_extent(n: usize) -> usize {
    n.div_ceil(SPATIAL_MULTIPLE).max(MIN_EXTENT / SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE
}

/// Mirror index into `[0, n)` without repeating the edge sample, for any offset.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn reflect_pad(data: &Array4<f64>, h2: usize, w2: usize) -> Array4<f64> {
    let (f, c, h, w) = data.dim();
    if (h, w) == (h2, w2) {
        return data.clone();
    }
    Array4::from_shape_fn((f, c, h2, w2), |(fi, ci, y, x)| {
        data[[
            fi,
            ci,
            reflect_index(y as isize, h),
            reflect_index(x as isize, w),
        ]]
    })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every image in `dir` (sorted by file name) as one video.
pub fn load_frames(dir: impl AsRef<Path>) -> Result<VideoFrames> {
    let dir = dir.as_ref();
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let first = open_image(&files[0])?.to_rgb8();
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = Array4::<f64>::zeros((files.len(), 3, h, w));
    for (i, path) in files.iter().enumerate() {
        let img = if i == 0 {
            first.clone()
        } else {
            open_image(path)?.to_rgb8()
        };
        let got = (img.height() as usize, img.width() as usize);
        if got != (h, w) {
            return Err(Error::InconsistentSize {
                path: path.clone(),
                got,
                expected: (h, w),
            });
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[i, c, y as usize, x as usize]] = px[c] as f64 / 255.0;
            }
        }
    }
    let mut frames = VideoFrames::from_unpadded(data)?;
    if let Ok(meta) = read_meta(dir) {
        frames.fps = meta.fps;
    }
    Ok(frames)
}

/// Loads `f` masks from `dir`; a single file is broadcast to every frame.
pub fn load_masks(dir: impl AsRef<Path>, f: usize) -> Result<MaskSequence> {
    let dir = dir.as_ref();
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    if files.len() != f && files.len() != 1 {
        return Err(Error::MaskCountMismatch {
            got: files.len(),
            expected: f,
        });
    }
    let grays = files
        .iter()
        .map(|p| open_image(p).map(|i| i.to_luma8()))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (grays[0].width() as usize, grays[0].height() as usize);
    let mut data = Array4::<f64>::zeros((f, 1, h, w));
    for i in 0..f {
        let img = &grays[if grays.len() == 1 { 0 } else { i }];
        let got = (img.height() as usize, img.width() as usize);
        if got != (h, w) {
            return Err(Error::InconsistentSize {
                path: files[i.min(files.len() - 1)].clone(),
                got,
                expected: (h, w),
            });
        }
        for (x, y, px) in img.enumerate_pixels() {
            data[[i, 0, y as usize, x as usize]] = px[0] as f64 / 255.0;
        }
    }
    MaskSequence::from_unpadded_gray(data)
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes frames as `frame_%05d.png`, cropped to the original size, plus `meta.json`.
pub fn save_frames(frames: &VideoFrames, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (oh, ow) = frames.original_size;
    for (i, frame) in frames.data.outer_iter().enumerate() {
        let img: RgbImage = ImageBuffer::from_fn(ow as u32, oh as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                to_u8(frame[[0, y, x]]),
                to_u8(frame[[1, y, x]]),
                to_u8(frame[[2, y, x]]),
            ])
        });
        let path = dir.join(frame_file_name(i));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    let meta = FrameMeta {
        fps: frames.fps,
        width: ow,
        height: oh,
    };
    fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Writes masks as white-on-black `frame_%05d.png`, cropped to `size` (h, w).
pub fn save_masks(masks: &MaskSequence, size: (usize, usize), dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, frame) in masks.data.outer_iter().enumerate() {
        let img = image::GrayImage::from_fn(size.1 as u32, size.0 as u32, |x, y| {
            image::Luma([to_u8(frame[[0, y as usize, x as usize]])])
        });
        let path = dir.join(frame_file_name(i));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<FrameMeta> {
    let bytes = fs::read(dir.as_ref().join(META_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn convolve_rows(src: ArrayView2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let r = (kernel.len() / 2) as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * src[[y, reflect_index(x as isize + k as isize - r, w)]])
            .sum()
    })
}

/// Separable Gaussian blur (kernel truncated at 4 sigma, reflected borders).
pub fn gaussian_blur(plane: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return plane.to_owned();
    }
    let kernel = gaussian_kernel(sigma);
    let rows = convolve_rows(plane, &kernel);
    convolve_rows(rows.t(), &kernel).reversed_axes()
}

/// Soft compositing weights: the blurred mask, never below the binary mask.
///
/// Values within 1e-9 of 0 or 1 snap to the endpoint so that fully known and
/// fully masked regions composite exactly.
pub fn soft_mask(masks: &MaskSequence, sigma: f64) -> Array4<f64> {
    let mut out = masks.data.clone();
    for mut frame in out.outer_iter_mut() {
        let mut plane = frame.index_axis_mut(Axis(0), 0);
        let blurred = gaussian_blur(plane.view(), sigma);
        plane.zip_mut_with(&blurred, |m, &b| {
            let v = m.max(b);
            *m = if v < 1e-9 {
                0.0
            } else if v > 1.0 - 1e-9 {
                1.0
            } else {
                v
            };
        });
    }
    out
}

/// `out = m * generated + (1 - m) * input` with `m` the soft mask, clipped to `[0, 1]`.
pub fn blend_output(
    generated: &VideoFrames,
    input: &VideoFrames,
    masks: &MaskSequence,
    blur_sigma: f64,
) -> Result<VideoFrames> {
    if generated.data.dim() != input.data.dim() {
        return Err(Error::shape(format!(
            "generated {:?} vs input {:?}",
            generated.data.dim(),
            input.data.dim()
        )));
    }
    check_aligned(input, masks)?;
    if !(blur_sigma >= 0.0) {
        return Err(Error::invalid("blur_sigma must be >= 0"));
    }
    let m = soft_mask(masks, blur_sigma);
    let mut out = input.data.clone();
    for ((f, c, y, x), v) in out.indexed_iter_mut() {
        let w = m[[f, 0, y, x]];
        if w == 0.0 {
            continue;
        }
        let g = generated.data[[f, c, y, x]];
        *v = if w == 1.0 { g } else { *v + w * (g - *v) }.clamp(0.0, 1.0);
    }
    input.with_data(out)
}

/// Crops back to the original size, e.g. before computing metrics on saved outputs.
pub fn crop_to_original(frames: &VideoFrames) -> Array4<f64> {
    let (h, w) = frames.original_size;
    frames.data.slice(s![.., .., ..h, ..w]).to_owned()
}

//! Sparse-input construction and online augmentation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::image::{DepthMap, RgbImage, SparseDepth};
use crate::tensor::{Shape, Tensor};

/// Which modalities the network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Problem {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "sd")]
    Sd,
    #[serde(rename = "RGBd")]
    Rgbd,
}

impl Problem {
    pub fn input_channels(self) -> usize {
        match self {
            Problem::Rgb => 3,
            Problem::Sd => 1,
            Problem::Rgbd => 4,
        }
    }

    pub fn uses_rgb(self) -> bool {
        self != Problem::Sd
    }

    pub fn uses_depth(self) -> bool {
        self != Problem::Rgb
    }
}

impl FromStr for Problem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Problem::Rgb),
            "sd" => Ok(Problem::Sd),
            "rgbd" => Ok(Problem::Rgbd),
            other => Err(Error::Parse(format!("unknown problem '{other}' (expected rgb, sd, rgbd)"))),
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Problem::Rgb => "RGB",
            Problem::Sd => "sd",
            Problem::Rgbd => "RGBd",
        })
    }
}

/// Keeps each valid ground-truth pixel independently with probability
/// `m / n`, where `n` is the number of valid pixels. Kept values are copied
/// unscaled.
pub fn bernoulli_sample<R: Rng + ?Sized>(gt: &DepthMap, m: usize, rng: &mut R) -> Result<SparseDepth> {
    let n = gt.valid_count();
    if n == 0 {
        return invalid("cannot sample from a depth image with no valid pixels");
    }
    if m > n {
        return invalid(format!("requested {m} samples but only {n} pixels are valid"));
    }
    let p = m as f64 / n as f64;
    let mut out = DepthMap::zeros(gt.height(), gt.width());
    for (o, &d) in out.as_mut_slice().iter_mut().zip(gt.as_slice()) {
        if d > 0.0 && rng.gen::<f64>() < p {
            *o = d;
        }
    }
    Ok(out)
}

/// Keeps valid pixels on rows `r` with `r ≡ offset (mod row_stride)`.
pub fn scanline_sample(gt: &DepthMap, row_stride: usize, offset: usize) -> Result<SparseDepth> {
    if row_stride == 0 {
        return invalid("row_stride must be at least 1");
    }
    let mut out = DepthMap::zeros(gt.height(), gt.width());
    for y in (0..gt.height()).filter(|y| y % row_stride == offset % row_stride) {
        for x in 0..gt.width() {
            out.set(y, x, gt.get(y, x));
        }
    }
    Ok(out)
}

/// Per-channel color statistics used to standardize RGB input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return invalid(format!("normalization needs finite means and positive stds, got {self:?}"));
        }
        Ok(())
    }

    /// `(v − mean) / std` per channel.
    pub fn apply(&self, rgb: &RgbImage) -> RgbImage {
        let mut out = rgb.clone();
        let plane = rgb.height() * rgb.width();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// One draw of the random training transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Enlargement factor, in `[1, 1.5]`; depths are divided by it.
    pub scale: f64,
    /// Rotation in degrees, in `[-5, 5]`.
    pub rotation_deg: f64,
    /// Brightness, contrast and saturation factors, each in `[0.6, 1.4]`.
    pub jitter: [f64; 3],
    pub flip: bool,
    /// Output `(height, width)`.
    pub crop: (usize, usize),
}

impl AugmentParams {
    pub fn identity(crop: (usize, usize)) -> Self {
        AugmentParams {
            scale: 1.0,
            rotation_deg: 0.0,
            jitter: [1.0; 3],
            flip: false,
            crop,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, crop: (usize, usize)) -> Self {
        AugmentParams {
            scale: rng.gen_range(1.0..=1.5),
            rotation_deg: rng.gen_range(-5.0..=5.0),
            jitter: [rng.gen_range(0.6..=1.4), rng.gen_range(0.6..=1.4), rng.gen_range(0.6..=1.4)],
            flip: rng.gen_bool(0.5),
            crop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (1.0..=1.5).contains(&self.scale)
            && (-5.0..=5.0).contains(&self.rotation_deg)
            && self.jitter.iter().all(|k| (0.6..=1.4).contains(k));
        if !ok {
            return invalid(format!("augmentation parameters out of range: {self:?}"));
        }
        Ok(())
    }
}

/// Nearest-neighbor source index for output coordinate `o` of an axis
/// enlarged by `s`.
fn nearest_src(o: usize, s: f64, src_len: usize) -> usize {
    (((o as f64 + 0.5) / s).floor() as usize).min(src_len - 1)
}

/// Resampling map from output pixels to source pixels (`None` = outside).
struct Warp {
    h: usize,
    w: usize,
    src: Vec<Option<usize>>,
}

impl Warp {
    fn new(in_h: usize, in_w: usize, scale: f64, rotation_deg: f64) -> Self {
        let h = ((in_h as f64) * scale).round() as usize;
        let w = ((in_w as f64) * scale).round() as usize;
        let (sin, cos) = rotation_deg.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut src = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                // Inverse rotation about the image center, in scaled space.
                let (sy, sx) = if rotation_deg == 0.0 {
                    (y as f64, x as f64)
                } else {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
                };
                let (ry, rx) = (sy.round(), sx.round());
                if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
                    src.push(None);
                    continue;
                }
                let oy = nearest_src(ry as usize, scale, in_h);
                let ox = nearest_src(rx as usize, scale, in_w);
                src.push(Some(oy * in_w + ox));
            }
        }
        Warp { h, w, src }
    }
}

fn jitter(rgb: &mut RgbImage, [brightness, contrast, saturation]: [f64; 3]) {
    for v in rgb.as_mut_slice() {
        *v *= brightness;
    }
    let luma = rgb.luminance();
    let mean = luma.iter().sum::<f64>() / luma.len().max(1) as f64;
    for v in rgb.as_mut_slice() {
        *v = (*v - mean) * contrast + mean;
    }
    let luma = rgb.luminance();
    let plane = luma.len();
    for (i, v) in rgb.as_mut_slice().iter_mut().enumerate() {
        let g = luma[i % plane];
        *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
    }
}

/// Applies, in order: nearest-neighbor scaling by `s` (depth divided by
/// `s`), nearest-neighbor rotation (pixels rotated in from outside become 0),
/// color jitter, normalization, horizontal flip and center crop.
///
/// Returns the normalized RGB and the transformed depth.
pub fn augment(rgb: &RgbImage, depth: &DepthMap, params: &AugmentParams, norm: &Normalization) -> Result<(RgbImage, DepthMap)> {
    params.validate()?;
    norm.validate()?;
    let (in_h, in_w) = (depth.height(), depth.width());
    if rgb.height() != in_h || rgb.width() != in_w {
        return shape_err(format!("rgb {}x{} and depth {in_h}x{in_w} differ", rgb.height(), rgb.width()));
    }
    let warp = Warp::new(in_h, in_w, params.scale, params.rotation_deg);
    let (ch, cw) = params.crop;
    if ch > warp.h || cw > warp.w || ch == 0 || cw == 0 {
        return invalid(format!("crop {ch}x{cw} does not fit the {}x{} transformed image", warp.h, warp.w));
    }

    let plane = in_h * in_w;
    let mut out_rgb = RgbImage::zeros(warp.h, warp.w);
    let mut out_depth = DepthMap::zeros(warp.h, warp.w);
    let out_plane = warp.h * warp.w;
    for (i, src) in warp.src.iter().enumerate() {
        if let Some(s) = *src {
            out_depth.as_mut_slice()[i] = depth.as_slice()[s] / params.scale;
            for c in 0..3 {
                out_rgb.as_mut_slice()[c * out_plane + i] = rgb.as_slice()[c * plane + s];
            }
        }
    }
    jitter(&mut out_rgb, params.jitter);
    let mut out_rgb = norm.apply(&out_rgb);
    if params.flip {
        flip_rows(out_rgb.as_mut_slice(), warp.w);
        flip_rows(out_depth.as_mut_slice(), warp.w);
    }
    let (top, left) = ((warp.h - ch) / 2, (warp.w - cw) / 2);
    Ok((out_rgb.crop(top, left, ch, cw)?, out_depth.crop(top, left, ch, cw)?))
}

fn flip_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

/// Stacks the modalities required by `problem` into a `(1, C, H, W)`
/// tensor: RGB channels first, sparse depth (raw meters) last.
pub fn make_input(rgb: Option<&RgbImage>, sparse: Option<&SparseDepth>, problem: Problem) -> Result<Tensor> {
    let rgb = if problem.uses_rgb() {
        Some(rgb.ok_or_else(|| Error::InvalidArgument(format!("problem {problem} needs an RGB image")))?)
    } else {
        None
    };
    let sparse = if problem.uses_depth() {
        Some(sparse.ok_or_else(|| Error::InvalidArgument(format!("problem {problem} needs sparse depth")))?)
    } else {
        None
    };
    let (h, w) = match (rgb, sparse) {
        (Some(r), Some(s)) => {
            if r.height() != s.height() || r.width() != s.width() {
                return shape_err(format!(
                    "rgb {}x{} and sparse depth {}x{} differ",
                    r.height(),
                    r.width(),
                    s.height(),
                    s.width()
                ));
            }
            (r.height(), r.width())
        }
        (Some(r), None) => (r.height(), r.width()),
        (None, Some(s)) => (s.height(), s.width()),
        (None, None) => unreachable!("every problem uses a modality"),
    };
    let mut data = Vec::with_capacity(problem.input_channels() * h * w);
    if let Some(r) = rgb {
        data.extend_from_slice(r.as_slice());
    }
    if let Some(s) = sparse {
        data.extend_from_slice(s.as_slice());
    }
    Tensor::from_vec(Shape::new(1, problem.input_channels(), h, w), data)
}

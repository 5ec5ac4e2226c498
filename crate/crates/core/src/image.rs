//! Single-image containers: depth maps, planar RGB images and frames.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Row-major depth image in meters; 0 marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A depth image that carries only a few samples; zeros are "no sample".
pub type SparseDepth = DepthMap;

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!("{} depth values for a {height}x{width} image", data.len()));
        }
        if let Some(d) = data.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return invalid(format!("depth {d} is negative or not finite"));
        }
        Ok(DepthMap { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DepthMap {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&d| d > 0.0).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// `(1, 1, H, W)` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.data.clone()).expect("sized")
    }

    /// Reads channel `c` of sample `n` as a depth map (negative values become 0).
    pub fn from_tensor(t: &Tensor, n: usize, c: usize) -> Self {
        let s = t.shape();
        DepthMap {
            height: s.h,
            width: s.w,
            data: t.plane(n, c).iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// Window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return invalid(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Ok(DepthMap { height: h, width: w, data })
    }
}

/// Planar RGB image, channel-major (`3 × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return shape_err(format!("{} rgb values for a {height}x{width} image", data.len()));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rec. 601 luma per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        (0..r.len()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return invalid(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            ));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Ok(RgbImage { height: h, width: w, data })
    }
}

/// Synchronized RGB and ground-truth depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub rgb: RgbImage,
    pub depth: DepthMap,
}

impl Frame {
    pub fn new(id: impl Into<String>, rgb: RgbImage, depth: DepthMap) -> Result<Self> {
        if rgb.height() != depth.height() || rgb.width() != depth.width() {
            return shape_err(format!(
                "rgb {}x{} and depth {}x{} differ",
                rgb.height(),
                rgb.width(),
                depth.height(),
                depth.width()
            ));
        }
        Ok(Frame {
            id: id.into(),
            rgb,
            depth,
        })
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    /// Centered window of size `h × w`.
    pub fn center_crop(&self, h: usize, w: usize) -> Result<Frame> {
        if h > self.height() || w > self.width() {
            return invalid(format!(
                "crop {h}x{w} larger than frame {} ({}x{})",
                self.id,
                self.height(),
                self.width()
            ));
        }
        let (top, left) = ((self.height() - h) / 2, (self.width() - w) / 2);
        Ok(Frame {
            id: self.id.clone(),
            rgb: self.rgb.crop(top, left, h, w)?,
            depth: self.depth.crop(top, left, h, w)?,
        })
    }
}

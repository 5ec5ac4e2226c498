//! Procedural RGB-D scenes.
//!
//! A fronto-parallel back wall plus a random mix of tilted planes, boxes and
//! spheres, z-buffered. Color is albedo × texture × a falloff that darkens
//! with distance, so RGB alone carries a depth cue. A few pixels on the far
//! side of depth edges are dropped, like the shadowing of real RGB-D sensors.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::image::{DepthMap, Frame, RgbImage};
use crate::sampling::Normalization;
use crate::seed;

/// Objects placed in a scene when the caller has no preference.
pub const DEFAULT_OBJECT_COUNT: usize = 5;
/// Upper bound on the fraction of pixels dropped as sensor holes.
pub const MAX_HOLE_FRACTION: f64 = 0.04;

const NEAR: f64 = 1.5;
const FAR: f64 = 8.0;

#[derive(Clone, Copy, Debug)]
struct Surface {
    albedo: [f64; 3],
    /// Texture frequency (cycles per image width) and orientation.
    freq: f64,
    angle: f64,
    phase: f64,
    contrast: f64,
}

impl Surface {
    fn random<R: Rng>(rng: &mut R) -> Self {
        Surface {
            albedo: [rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0)],
            freq: rng.gen_range(2.0..8.0),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            contrast: rng.gen_range(0.05..0.2),
        }
    }

    fn texture(&self, u: f64, v: f64) -> f64 {
        let t = u * self.angle.cos() + v * self.angle.sin();
        1.0 - self.contrast + self.contrast * (std::f64::consts::TAU * self.freq * t + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    /// Depth varies linearly with image row below a horizon row.
    Plane { horizon: f64, z_top: f64, z_bottom: f64 },
    /// Axis-aligned rectangle with a gentle horizontal tilt.
    Box { y0: f64, y1: f64, x0: f64, x1: f64, z: f64, tilt: f64 },
    Sphere { cy: f64, cx: f64, r: f64, z: f64, depth_radius: f64 },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R) -> Self {
        match rng.gen_range(0..3) {
            0 => Shape::Plane {
                horizon: rng.gen_range(0.35..0.75),
                z_top: rng.gen_range(4.5..7.5),
                z_bottom: rng.gen_range(NEAR..2.5),
            },
            1 => {
                let (cy, cx) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
                let (hh, hw) = (rng.gen_range(0.08..0.25), rng.gen_range(0.08..0.25));
                Shape::Box {
                    y0: cy - hh,
                    y1: cy + hh,
                    x0: cx - hw,
                    x1: cx + hw,
                    z: rng.gen_range(2.0..6.0),
                    tilt: rng.gen_range(-1.0..1.0),
                }
            }
            _ => Shape::Sphere {
                cy: rng.gen_range(0.15..0.85),
                cx: rng.gen_range(0.15..0.85),
                r: rng.gen_range(0.08..0.22),
                z: rng.gen_range(2.5..6.5),
                depth_radius: rng.gen_range(0.2..0.8),
            },
        }
    }

    /// Depth and a Lambert-like shading factor at normalized `(v, u)`.
    fn hit(&self, v: f64, u: f64) -> Option<(f64, f64)> {
        match *self {
            Shape::Plane { horizon, z_top, z_bottom } => {
                (v >= horizon).then(|| {
                    let t = (v - horizon) / (1.0 - horizon);
                    (z_top + (z_bottom - z_top) * t, 1.0)
                })
            }
            Shape::Box { y0, y1, x0, x1, z, tilt } => {
                (v >= y0 && v <= y1 && u >= x0 && u <= x1).then(|| (z + tilt * (u - (x0 + x1) / 2.0), 0.9))
            }
            Shape::Sphere { cy, cx, r, z, depth_radius } => {
                let d2 = ((v - cy) / r).powi(2) + ((u - cx) / r).powi(2);
                (d2 <= 1.0).then(|| {
                    let nz = (1.0 - d2).sqrt();
                    (z - depth_radius * nz, 0.35 + 0.65 * nz)
                })
            }
        }
    }
}

/// Brightness falloff with distance.
fn falloff(depth: f64) -> f64 {
    (2.0 / depth).clamp(0.15, 1.0)
}

/// Renders one scene. Deterministic in `seed`; at least 95 % of the pixels
/// carry valid depth, all within `[1.5, 8]` m.
pub fn generate_scene(seed: u64, h: usize, w: usize, object_count: usize) -> Result<Frame> {
    if h < 16 || w < 16 {
        return invalid(format!("scenes must be at least 16x16, got {h}x{w}"));
    }
    let mut rng = seed::stream(seed, &[0x5ce4e]);
    let wall_z = rng.gen_range(6.0..FAR);
    let wall = Surface::random(&mut rng);
    let objects: Vec<(Shape, Surface)> = (0..object_count)
        .map(|_| (Shape::random(&mut rng), Surface::random(&mut rng)))
        .collect();

    let mut depth = DepthMap::zeros(h, w);
    let mut rgb = RgbImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (v, u) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
            let mut best = (wall_z, 1.0, &wall);
            for (shape, surface) in &objects {
                if let Some((z, shade)) = shape.hit(v, u) {
                    if z < best.0 {
                        best = (z, shade, surface);
                    }
                }
            }
            let (z, shade, surface) = best;
            let z = z.clamp(NEAR, FAR);
            depth.set(y, x, z);
            let intensity = surface.texture(u, v) * shade * falloff(z);
            for c in 0..3 {
                rgb.set(c, y, x, (surface.albedo[c] * intensity).clamp(0.0, 1.0));
            }
        }
    }
    punch_holes(&mut depth, &mut rng);
    Frame::new(format!("scene_{seed:08}"), rgb, depth)
}

/// Drops some pixels on the far side of depth discontinuities.
fn punch_holes<R: Rng>(depth: &mut DepthMap, rng: &mut R) {
    let (h, w) = (depth.height(), depth.width());
    let budget = (MAX_HOLE_FRACTION * (h * w) as f64) as usize;
    let mut holes = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let z = depth.get(y, x);
            let behind_edge = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && z - depth.get(ny as usize, nx as usize) > 0.5
            });
            if behind_edge && rng.gen_bool(0.3) {
                holes.push((y, x));
            }
        }
    }
    for &(y, x) in holes.iter().take(budget) {
        depth.set(y, x, 0.0);
    }
}

/// Per-channel mean and standard deviation of RGB over all frames.
pub fn compute_normalization(frames: &[Frame]) -> Result<Normalization> {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0usize;
    for f in frames {
        for c in 0..3 {
            for &v in f.rgb.channel(c) {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += f.height() * f.width();
    }
    if count == 0 {
        return invalid("normalization needs at least one pixel");
    }
    let n = count as f64;
    let mut norm = Normalization {
        mean: [0.0; 3],
        std: [0.0; 3],
    };
    for c in 0..3 {
        norm.mean[c] = sum[c] / n;
        // Constant channels get unit scale rather than a division by zero.
        let var = (sq[c] / n - norm.mean[c] * norm.mean[c]).max(0.0);
        norm.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    Ok(norm)
}

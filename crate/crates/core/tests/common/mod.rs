#![allow(dead_code)]

use rand::Rng;
use s2d::Tensor;

/// Direct-loop convolution, no im2col, no GEMM.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Tensor::zeros([xs.n, ws.n, oh, ow]);
    for n in 0..xs.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for c in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xo * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= xs.h as i64 || ix >= xs.w as i64 {
                                    continue;
                                }
                                acc += x.get(n, c, iy as usize, ix as usize) * w.get(o, c, ky, kx);
                            }
                        }
                    }
                    out.set(n, o, y, xo, acc);
                }
            }
        }
    }
    out
}

/// Picks channel `c` of every sample as a one-channel tensor.
pub fn channel(x: &Tensor, c: usize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros([s.n, 1, s.h, s.w]);
    for n in 0..s.n {
        out.data_mut()[n * s.plane()..(n + 1) * s.plane()].copy_from_slice(x.plane(n, c));
    }
    out
}

/// Concatenates one-channel tensors along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Tensor {
    let s = parts[0].shape();
    let mut out = Tensor::zeros([s.n, parts.len(), s.h, s.w]);
    for (c, p) in parts.iter().enumerate() {
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    out.set(n, c, y, x, p.get(n, 0, y, x));
                }
            }
        }
    }
    out
}

fn orient(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> bool {
    orient(a, b, p) == 0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

/// Point-in-hull by exhaustion: `p` is in the convex hull of `pts` iff it
/// equals a point, lies on a segment between two points, or lies in a
/// non-degenerate triangle of three points.
pub fn brute_in_hull(pts: &[(i64, i64)], p: (i64, i64)) -> bool {
    let n = pts.len();
    for i in 0..n {
        if pts[i] == p {
            return true;
        }
        for j in i + 1..n {
            if on_segment(pts[i], pts[j], p) {
                return true;
            }
            for k in j + 1..n {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                if orient(a, b, c) == 0 {
                    continue;
                }
                let d = [orient(a, b, p), orient(b, c, p), orient(c, a, p)];
                if d.iter().all(|&v| v >= 0) || d.iter().all(|&v| v <= 0) {
                    return true;
                }
            }
        }
    }
    false
}

/// Uniformly random rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    use rand_distr::StandardNormal;
    let mut q = [0.0f64; 4];
    for v in &mut q {
        *v = rng.sample(StandardNormal);
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Norm-wise relative difference: max |a − b| over max |b|.
pub fn norm_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.data().iter().fold(0.0f64, |m, y| m.max(y.abs()));
    diff / scale
}

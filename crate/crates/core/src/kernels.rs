//! Raw convolution, interpolation and pooling kernels on flat slices.
//!
//! Everything here operates on a single `(c, h, w)` sample; batching and
//! bookkeeping live in [`crate::autograd`]. Convolutions go through
//! im2col followed by a GEMM.

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return None;
        }
        let ph = in_h + 2 * pad;
        let pw = in_w + 2 * pad;
        if ph < kh || pw < kw {
            return None;
        }
        Some(ConvGeom {
            in_c,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Rows of the im2col matrix: `in_c · kh · kw`.
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Columns of the im2col matrix: `out_h · out_w`.
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds input patches into a `(in_c·kh·kw) × (out_h·out_w)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    debug_assert_eq!(x.len(), g.in_c * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    if g.is_pointwise() {
        col.copy_from_slice(x);
        return;
    }
    let p = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (adds) columns back into an image.
pub fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    debug_assert_eq!(x.len(), g.in_c * g.in_h * g.in_w);
    if g.is_pointwise() {
        for (a, b) in x.iter_mut().zip(col) {
            *a += b;
        }
        return;
    }
    let p = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Strided matrix operand: `(data, row_stride, col_stride)`.
pub type MatRef<'a> = (&'a [f64], isize, isize);

/// `c ← a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` (row-major, contiguous).
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm lhs out of bounds");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm rhs out of bounds");
    // SAFETY: operand extents were checked above; c is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution forward for one sample. `w` is `(out_c, in_c, kh, kw)`.
pub fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, out_c: usize, g: &ConvGeom, out: &mut [f64]) {
    let k = g.col_rows();
    let p = g.col_cols();
    let mut col = vec![0.0; k * p];
    im2col(x, g, &mut col);
    gemm(
        out_c,
        k,
        p,
        (w, k as isize, 1),
        (&col, p as isize, 1),
        0.0,
        out,
    );
    if let Some(b) = bias {
        for (oc, row) in out.chunks_mut(p).enumerate() {
            for v in row {
                *v += b[oc];
            }
        }
    }
}

/// Gradient of a one-sample convolution w.r.t. its input (accumulated into `dx`).
pub fn conv_backward_input(dy: &[f64], w: &[f64], out_c: usize, g: &ConvGeom, dx: &mut [f64]) {
    let k = g.col_rows();
    let p = g.col_cols();
    let mut dcol = vec![0.0; k * p];
    // dcol = wᵀ · dy
    gemm(k, out_c, p, (w, 1, k as isize), (dy, p as isize, 1), 0.0, &mut dcol);
    col2im(&dcol, g, dx);
}

/// Gradient of a one-sample convolution w.r.t. its weights (accumulated into `dw`).
pub fn conv_backward_weight(x: &[f64], dy: &[f64], out_c: usize, g: &ConvGeom, dw: &mut [f64]) {
    let k = g.col_rows();
    let p = g.col_cols();
    let mut col = vec![0.0; k * p];
    im2col(x, g, &mut col);
    // dw += dy · colᵀ
    gemm(out_c, p, k, (dy, p as isize, 1), (&col, 1, p as isize), 1.0, dw);
}

/// Transposed convolution forward for one sample.
///
/// `w` is `(in_c, out_c, kh, kw)`; `g` describes the *forward* convolution that
/// maps the `(out_c, out_h', out_w')` result back to the `(in_c, h, w)` input,
/// i.e. `g.in_*` are the transposed-conv output extents and `g.out_*` its input.
pub fn conv_transpose_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, in_c: usize, g: &ConvGeom, out: &mut [f64]) {
    let k = g.col_rows();
    let p = g.col_cols();
    let mut col = vec![0.0; k * p];
    gemm(k, in_c, p, (w, 1, k as isize), (x, p as isize, 1), 0.0, &mut col);
    out.fill(0.0);
    col2im(&col, g, out);
    if let Some(b) = bias {
        let plane = g.in_h * g.in_w;
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v += b[c];
            }
        }
    }
}

/// Bilinear source coordinate under the align-corners convention.
#[inline]
pub fn align_corners_src(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if out_len <= 1 || in_len <= 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = (pos.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize of one `h×w` plane (align corners).
pub fn bilinear_plane(x: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, out: &mut [f64]) {
    for oy in 0..out_h {
        let (y0, y1, fy) = align_corners_src(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = align_corners_src(ox, w, out_w);
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
}

/// Adjoint of [`bilinear_plane`], accumulated into `dx`.
pub fn bilinear_plane_backward(dy: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, dx: &mut [f64]) {
    for oy in 0..out_h {
        let (y0, y1, fy) = align_corners_src(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = align_corners_src(ox, w, out_w);
            let g = dy[oy * out_w + ox];
            dx[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            dx[y0 * w + x1] += g * (1.0 - fy) * fx;
            dx[y1 * w + x0] += g * fy * (1.0 - fx);
            dx[y1 * w + x1] += g * fy * fx;
        }
    }
}

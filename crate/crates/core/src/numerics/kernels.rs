//! Raw slice kernels behind the differentiable ops.

use crate::error::{CmtError, Result};

/// `c = alpha * a·b + beta * c` for row/column-strided operands.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n` (row-major, contiguous).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller's strides address only elements inside `a` and `b`
    // (checked by the debug assertions below), and `c` is a contiguous m×n block.
    debug_assert!(k == 0 || max_index(m, k, a_rs, a_cs) < a.len());
    debug_assert!(k == 0 || max_index(k, n, b_rs, b_cs) < b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(CmtError::ShapeMismatch(format!(
                "conv2d expects x[C,H,W] and w[O,C,kh,kw], got {x_shape:?} and {w_shape:?}"
            )));
        }
        let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (c_out, wc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc != c_in {
            return Err(CmtError::ShapeMismatch(format!(
                "conv2d input has {c_in} channels, kernel expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(CmtError::ShapeMismatch("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return Err(CmtError::ShapeMismatch(format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `x[C,H,W]` into `cols[C*kh*kw, Ho*Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ol = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * ol];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `dcols` back into `dx` (accumulating).
pub(crate) fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &dcols[row * ol..(row + 1) * ol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; returns the output and the unfolded input.
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let ol = g.out_len();
    let pl = g.patch_len();
    let mut out = vec![0.0; g.c_out * ol];
    for (o, row) in out.chunks_mut(ol).enumerate() {
        row.fill(b[o]);
    }
    gemm(
        g.c_out,
        pl,
        ol,
        w,
        pl as isize,
        1,
        &cols,
        ol as isize,
        1,
        1.0,
        &mut out,
    );
    (out, cols)
}

/// 2×2 stride-2 max pooling with ceil-mode edges.
///
/// Returns the pooled map and, for each output cell, the flat input index of
/// the selected maximum. Ties keep the first cell in row-major order.
pub(crate) fn max_pool2x2(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let idx = (ch * h + iy) * w + ix;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, ho, wo)
}

/// Bilinear sampling taps for one RoIAlign call.
///
/// For every output bin the returned slice holds `4 * samples²` pairs of
/// (flat spatial index, weight). Weights already include the `1/samples²`
/// averaging factor. Coordinates follow the half-pixel convention: cell
/// `(i, j)` is centered at `(j + 0.5, i + 0.5)`.
pub(crate) fn roi_align_taps(
    bbox: [f64; 4],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    samples: usize,
) -> Vec<(usize, f64)> {
    let [x1, y1, x2, y2] = bbox;
    let bin_w = (x2 - x1) / out_w as f64;
    let bin_h = (y2 - y1) / out_h as f64;
    let s = samples as f64;
    let norm = 1.0 / (s * s);
    let mut taps = Vec::with_capacity(out_h * out_w * 4 * samples * samples);
    for by in 0..out_h {
        for bx in 0..out_w {
            for sy in 0..samples {
                let y = y1 + (by as f64 + (sy as f64 + 0.5) / s) * bin_h - 0.5;
                let (iy0, iy1, fy) = bilinear_neighbors(y, h);
                for sx in 0..samples {
                    let x = x1 + (bx as f64 + (sx as f64 + 0.5) / s) * bin_w - 0.5;
                    let (ix0, ix1, fx) = bilinear_neighbors(x, w);
                    taps.push((iy0 * w + ix0, (1.0 - fy) * (1.0 - fx) * norm));
                    taps.push((iy0 * w + ix1, (1.0 - fy) * fx * norm));
                    taps.push((iy1 * w + ix0, fy * (1.0 - fx) * norm));
                    taps.push((iy1 * w + ix1, fy * fx * norm));
                }
            }
        }
    }
    taps
}

#[inline]
fn bilinear_neighbors(u: f64, extent: usize) -> (usize, usize, f64) {
    let lo = u.floor();
    let frac = u - lo;
    let last = extent as isize - 1;
    let i0 = (lo as isize).clamp(0, last) as usize;
    let i1 = (lo as isize + 1).clamp(0, last) as usize;
    (i0, i1, frac)
}

/// Separable Gaussian blur of a `[C,H,W]` image with edge clamping.
///
/// `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur(img: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();

    let mut tmp = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * img[(ch * h + y) * w + xx];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// Bilinear sample of channel `ch` of a `[C,H,W]` image at pixel coordinate
/// `(x, y)` (half-pixel convention, edge clamped).
pub fn sample_bilinear(img: &[f64], h: usize, w: usize, ch: usize, x: f64, y: f64) -> f64 {
    let (ix0, ix1, fx) = bilinear_neighbors(x - 0.5, w);
    let (iy0, iy1, fy) = bilinear_neighbors(y - 0.5, h);
    let base = ch * h * w;
    let v00 = img[base + iy0 * w + ix0];
    let v01 = img[base + iy0 * w + ix1];
    let v10 = img[base + iy1 * w + ix0];
    let v11 = img[base + iy1 * w + ix1];
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

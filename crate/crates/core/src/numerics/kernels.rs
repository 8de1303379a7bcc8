//! Slice-level kernels shared by the eager functions and the tape.
//!
//! Everything is row-major. Backward kernels accumulate into caller-owned
//! buffers so the tape can sum contributions from several consumers.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` without overflow for large `x` or cancellation for very negative `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// Accumulates `ga += g·bᵀ` and `gb += aᵀ·g` for `c = a·b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    g: &[f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(ga) = ga {
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                ga[i * k + p] += dot(g_row, b_row);
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let gb_row = &mut gb[p * n..(p + 1) * n];
                axpy(aip, g_row, gb_row);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    if alpha == 0.0 {
        return;
    }
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `y[rows×out] = x[rows×inp] · wᵀ + b` with `w` stored `out×inp`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for i in 0..rows {
        let x_row = &x[i * inp..(i + 1) * inp];
        let y_row = &mut y[i * out..(i + 1) * out];
        for (o, yv) in y_row.iter_mut().enumerate() {
            *yv = dot(x_row, &w[o * inp..(o + 1) * inp]) + b.map_or(0.0, |b| b[o]);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(gx) = gx {
        for i in 0..rows {
            let gx_row = &mut gx[i * inp..(i + 1) * inp];
            for o in 0..out {
                axpy(g[i * out + o], &w[o * inp..(o + 1) * inp], gx_row);
            }
        }
    }
    if let Some(gw) = gw {
        for i in 0..rows {
            let x_row = &x[i * inp..(i + 1) * inp];
            for o in 0..out {
                axpy(g[i * out + o], x_row, &mut gw[o * inp..(o + 1) * inp]);
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..rows {
            for o in 0..out {
                gb[o] += g[i * out + o];
            }
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax` of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Geometry of a 2-D convolution over an `H×W×C` (channels-last) image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Length of one unfolded patch, ordered `(ky, kx, c)`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    /// Unfolds the image into `(out_h·out_w) × patch_len` rows.
    pub fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let (oh, ow, pl) = (self.out_height(), self.out_width(), self.patch_len());
        let mut cols = vec![0.0; oh * ow * pl];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * pl;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let src = (iy as usize * self.width + ix as usize) * self.in_ch;
                        let dst = base + (ky * self.kernel + kx) * self.in_ch;
                        cols[dst..dst + self.in_ch].copy_from_slice(&img[src..src + self.in_ch]);
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds unfolded gradients back onto the image gradient.
    pub fn col2im(&self, gcols: &[f64], gimg: &mut [f64]) {
        let (oh, ow, pl) = (self.out_height(), self.out_width(), self.patch_len());
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * pl;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.width + ix as usize) * self.in_ch;
                        let src = base + (ky * self.kernel + kx) * self.in_ch;
                        for c in 0..self.in_ch {
                            gimg[dst + c] += gcols[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise causal 1-D convolution over a `len×ch` sequence.
///
/// `y[t,c] = b[c] + Σ_j w[c,j]·x[t-(k-1)+j, c]` with zeros before the start.
pub fn causal_conv1d(x: &[f64], w: &[f64], b: &[f64], len: usize, ch: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; len * ch];
    for t in 0..len {
        for c in 0..ch {
            let mut acc = b[c];
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src >= 0 {
                    acc += w[c * k + j] * x[src as usize * ch + c];
                }
            }
            y[t * ch + c] = acc;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn causal_conv1d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    len: usize,
    ch: usize,
    k: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    for t in 0..len {
        for c in 0..ch {
            let gv = g[t * ch + c];
            if let Some(gb) = gb.as_deref_mut() {
                gb[c] += gv;
            }
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let src = src as usize * ch + c;
                if let Some(gx) = gx.as_deref_mut() {
                    gx[src] += gv * w[c * k + j];
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[c * k + j] += gv * x[src];
                }
            }
        }
    }
}

/// Row-wise RMS normalization with a learnable per-column scale.
pub fn rms_norm(x: &[f64], scale: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let r = 1.0 / (xr.iter().map(|v| v * v).sum::<f64>() / cols as f64 + eps).sqrt();
        for j in 0..cols {
            y[i * cols + j] = xr[j] * r * scale[j];
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn rms_norm_backward(
    g: &[f64],
    x: &[f64],
    scale: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
    mut gx: Option<&mut [f64]>,
    mut gscale: Option<&mut [f64]>,
) {
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let gr = &g[i * cols..(i + 1) * cols];
        let r = 1.0 / (xr.iter().map(|v| v * v).sum::<f64>() / cols as f64 + eps).sqrt();
        if let Some(gs) = gscale.as_deref_mut() {
            for j in 0..cols {
                gs[j] += gr[j] * xr[j] * r;
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let proj: f64 = (0..cols).map(|j| gr[j] * scale[j] * xr[j]).sum();
            let coef = r * r * r * proj / cols as f64;
            for j in 0..cols {
                gx[i * cols + j] += r * gr[j] * scale[j] - coef * xr[j];
            }
        }
    }
}

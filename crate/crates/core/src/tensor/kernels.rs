//! Raw numeric kernels behind the tape operations. All buffers are NCHW.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h,
            w,
            kernel,
            stride,
            pad,
            h_out: (h + 2 * pad - kernel) / stride + 1,
            w_out: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Output columns `lo..hi` whose kernel tap `kx` lands inside the input.
    fn valid_range(&self, kx: usize) -> (usize, usize) {
        // ix = ox·s + kx − pad must satisfy 0 <= ix < w.
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.w_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_range(kx);
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[C, H, W]`.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let k = g.kernel;
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_range(kx);
                    let row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in lo..hi {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[ix] = dst[ix] + row[ox];
                    }
                }
            }
        }
    }
}

/// Convolution forward for a batch. Returns the output and the unfolded
/// columns of every sample (kept for the backward pass).
pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    n: usize,
    c_out: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let rows = g.col_rows();
    let cols_len = rows * g.col_cols();
    let hw_out = g.col_cols();
    let mut cols = vec![T::zero(); n * cols_len];
    let mut out = vec![T::zero(); n * c_out * hw_out];
    let in_len = g.c_in * g.h * g.w;
    for s in 0..n {
        let col = &mut cols[s * cols_len..(s + 1) * cols_len];
        im2col(g, &x[s * in_len..(s + 1) * in_len], col);
        let o = &mut out[s * c_out * hw_out..(s + 1) * c_out * hw_out];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(hw_out).enumerate() {
                chunk.fill(b[co]);
            }
        }
        T::gemm(c_out, rows, hw_out, weight, rows, 1, col, hw_out, 1, o, bias.is_some());
    }
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    c_out: usize,
    cols: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let rows = g.col_rows();
    let hw_out = g.col_cols();
    let cols_len = rows * hw_out;
    let in_len = g.c_in * g.h * g.w;
    let mut dw = vec![T::zero(); c_out * rows];
    let mut db = vec![T::zero(); c_out];
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dcols = if need_dx { vec![T::zero(); cols_len] } else { Vec::new() };
    for s in 0..n {
        let d = &dout[s * c_out * hw_out..(s + 1) * c_out * hw_out];
        let col = &cols[s * cols_len..(s + 1) * cols_len];
        // dW += dOut · colsᵀ
        T::gemm(c_out, hw_out, rows, d, hw_out, 1, col, 1, hw_out, &mut dw, true);
        for (co, chunk) in d.chunks(hw_out).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum();
        }
        if let Some(dx) = dx.as_mut() {
            // dCols = Wᵀ · dOut
            T::gemm(rows, c_out, hw_out, weight, 1, rows, d, hw_out, 1, &mut dcols, false);
            col2im(g, &dcols, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 max pooling with stride 2. Returns output and the flat input index
/// selected for each output element (first maximum wins ties).
pub(crate) fn maxpool2_forward<T: Real>(planes: usize, h: usize, w: usize, x: &[T]) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2_forward<T: Real>(planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            let src = &x[p * h * w + (oy / 2) * w..p * h * w + (oy / 2 + 1) * w];
            let dst = &mut out[p * ho * wo + oy * wo..p * ho * wo + (oy + 1) * wo];
            for (ox, o) in dst.iter_mut().enumerate() {
                *o = src[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(planes: usize, h: usize, w: usize, dout: &[T]) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let i = p * h * w + (oy / 2) * w + ox / 2;
                dx[i] = dx[i] + dout[p * ho * wo + oy * wo + ox];
            }
        }
    }
    dx
}

/// Direct nested-loop convolution, used only to check the unfolded kernel.
pub fn reference_conv2d(
    x: &[f64],
    (n, c_in, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for s in 0..n {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * c_in + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * c_in + ci) * kernel + ky) * kernel + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

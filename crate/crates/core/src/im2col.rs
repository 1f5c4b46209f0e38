//! Column-matrix convolution on channel-major activations.
//!
//! Activations here are laid out `(C, N, T, H, W)` so that a pointwise
//! convolution is a single GEMM and per-channel statistics are contiguous.
//! Column matrices have one row per `(c, k, i, j)` tap and one column per
//! output position `(n, t', h', w')`.

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::gemm::{gemm, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geom {
    pub c: usize,
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub spec: ConvSpec,
    pub to: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn new(spec: ConvSpec, c: usize, n: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        let (to, ho, wo) = spec.output_dims(t, h, w)?;
        Ok(Geom { c, n, t, h, w, spec, to, ho, wo })
    }

    pub fn kvol(&self) -> usize {
        self.spec.kernel_t * self.spec.kernel_h * self.spec.kernel_w
    }

    pub fn in_cols(&self) -> usize {
        self.n * self.t * self.h * self.w
    }

    pub fn out_cols(&self) -> usize {
        self.n * self.to * self.ho * self.wo
    }

    /// Input and column matrix coincide: 1×1×1, unit stride, no padding.
    pub fn is_pointwise(&self) -> bool {
        let s = &self.spec;
        self.kvol() == 1 && s.stride_h == 1 && s.stride_w == 1 && s.pad_t == 0 && s.pad_h == 0 && s.pad_w == 0
    }
}

#[inline]
fn valid_range(out: usize, stride: usize, offset: isize, n: usize) -> (usize, usize) {
    // positions o with 0 <= o*stride + offset < n
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
    let hi_num = n as isize - offset;
    let hi = if hi_num <= 0 { 0 } else { (hi_num as usize).div_ceil(stride) };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Column budget (in scalars) for one tile of a column matrix.
const TILE: usize = 1 << 16;

/// Ranges `[f0, f1)` over the flattened output-frame index `n·T' + t'` whose
/// column tiles (`rows` rows) stay near [`TILE`] scalars.
pub(crate) fn frame_tiles(g: &Geom, rows: usize) -> impl Iterator<Item = (usize, usize)> {
    let frames = g.n * g.to;
    let step = (TILE / (rows * g.ho * g.wo).max(1)).clamp(1, frames.max(1));
    (0..frames).step_by(step).map(move |f0| (f0, (f0 + step).min(frames)))
}

/// Visit every `(row, column-run)` of the column tile for channels `c0..c1`
/// and output frames `f0..f1`: `f(row, dst_offset, src_offset, len, stride)`
/// describes a run of `len` entries starting at tile column `dst_offset`
/// taken from the input at `src_offset` with step `stride`. Entries not
/// visited are padding.
fn for_each_run(
    g: &Geom,
    (c0, c1): (usize, usize),
    (f0, f1): (usize, usize),
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let s = &g.spec;
    let (kt, kh, kw) = (s.kernel_t, s.kernel_h, s.kernel_w);
    let plane = g.ho * g.wo;
    for c in c0..c1 {
        for k in 0..kt {
            let toff = (k * s.dilation_t) as isize - s.pad_t as isize;
            for i in 0..kh {
                let hoff = (i * s.dilation_h) as isize - s.pad_h as isize;
                let (h_lo, h_hi) = valid_range(g.ho, s.stride_h, hoff, g.h);
                for j in 0..kw {
                    let woff = (j * s.dilation_w) as isize - s.pad_w as isize;
                    let (w_lo, w_hi) = valid_range(g.wo, s.stride_w, woff, g.w);
                    let row = (c - c0) * kt * kh * kw + (k * kh + i) * kw + j;
                    if w_hi <= w_lo || h_hi <= h_lo {
                        continue;
                    }
                    for fr in f0..f1 {
                        let (n, t) = (fr / g.to, fr % g.to);
                        let ts = t as isize + toff;
                        if ts < 0 || ts as usize >= g.t {
                            continue;
                        }
                        let src_plane = ((c * g.n + n) * g.t + ts as usize) * g.h;
                        let dst_plane = (fr - f0) * plane;
                        for h in h_lo..h_hi {
                            let hs = (h * s.stride_h) as isize + hoff;
                            let ws0 = (w_lo * s.stride_w) as isize + woff;
                            f(
                                row,
                                dst_plane + h * g.wo + w_lo,
                                (src_plane + hs as usize) * g.w + ws0 as usize,
                                w_hi - w_lo,
                                s.stride_w,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Column tile for channels `chan` and output frames `frames` of `x`
/// (`(C, N, T, H, W)` layout), written into `col`.
pub(crate) fn im2col(x: &[f64], g: &Geom, chan: (usize, usize), frames: (usize, usize), col: &mut Vec<f64>) {
    let cols = (frames.1 - frames.0) * g.ho * g.wo;
    col.clear();
    col.resize((chan.1 - chan.0) * g.kvol() * cols, 0.0);
    for_each_run(g, chan, frames, |row, dst, src, len, stride| {
        let d = &mut col[row * cols + dst..row * cols + dst + len];
        if stride == 1 {
            d.copy_from_slice(&x[src..src + len]);
        } else {
            for (q, v) in d.iter_mut().enumerate() {
                *v = x[src + q * stride];
            }
        }
    });
}

/// Scatter-add a column-tile gradient back into `gx`.
pub(crate) fn col2im_add(col: &[f64], g: &Geom, chan: (usize, usize), frames: (usize, usize), gx: &mut [f64]) {
    let cols = (frames.1 - frames.0) * g.ho * g.wo;
    for_each_run(g, chan, frames, |row, dst, src, len, stride| {
        let s = &col[row * cols + dst..row * cols + dst + len];
        if stride == 1 {
            for (a, b) in gx[src..src + len].iter_mut().zip(s) {
                *a += b;
            }
        } else {
            for (q, v) in s.iter().enumerate() {
                gx[src + q * stride] += v;
            }
        }
    });
}

/// Dense convolution forward: `y (C_o × cols) = W (C_o × C_i·kvol) · col`.
pub(crate) fn conv_forward(x: &[f64], g: &Geom, w: &[f64], c_out: usize) -> Vec<f64> {
    let rows = g.c * g.kvol();
    let cols = g.out_cols();
    let wv = View::row_major(w, c_out, rows);
    let mut y = vec![0.0; c_out * cols];
    if g.is_pointwise() {
        gemm(1.0, wv, View::row_major(x, rows, cols), 0.0, &mut y, cols);
        return y;
    }
    let plane = g.ho * g.wo;
    let mut col = Vec::new();
    for (f0, f1) in frame_tiles(g, rows) {
        im2col(x, g, (0, g.c), (f0, f1), &mut col);
        let tc = (f1 - f0) * plane;
        gemm(1.0, wv, View::row_major(&col, rows, tc), 0.0, &mut y[f0 * plane..], cols);
    }
    y
}

/// Dense convolution backward from the forward input `x`. Returns
/// `(grad_x, grad_w)`; `grad_x` is skipped when `need_gx` is false.
pub(crate) fn conv_backward(
    x: &[f64],
    g: &Geom,
    w: &[f64],
    c_out: usize,
    gy: &[f64],
    need_gx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let rows = g.c * g.kvol();
    let cols = g.out_cols();
    let gy_v = View::row_major(gy, c_out, cols);
    let wt = View::row_major(w, c_out, rows).t();
    let mut gw = vec![0.0; c_out * rows];
    if g.is_pointwise() {
        gemm(1.0, gy_v, View::row_major(x, rows, cols).t(), 0.0, &mut gw, rows);
        let gx = need_gx.then(|| {
            let mut gx = vec![0.0; rows * cols];
            gemm(1.0, wt, gy_v, 0.0, &mut gx, cols);
            gx
        });
        return (gx, gw);
    }
    let plane = g.ho * g.wo;
    let mut gx = need_gx.then(|| vec![0.0; g.c * g.in_cols()]);
    let (mut col, mut gcol) = (Vec::new(), Vec::new());
    for (f0, f1) in frame_tiles(g, rows) {
        let tc = (f1 - f0) * plane;
        let gy_t = gy_v.block(0, c_out, f0 * plane, tc);
        im2col(x, g, (0, g.c), (f0, f1), &mut col);
        gemm(1.0, gy_t, View::row_major(&col, rows, tc).t(), 1.0, &mut gw, rows);
        if let Some(gx) = gx.as_mut() {
            gcol.clear();
            gcol.resize(rows * tc, 0.0);
            gemm(1.0, wt, gy_t, 0.0, &mut gcol, tc);
            col2im_add(&gcol, g, (0, g.c), (f0, f1), gx);
        }
    }
    (gx, gw)
}

/// `(N, C, ...)` ⇄ `(C, N, ...)`: swap the two leading axes of a flat buffer.
pub(crate) fn swap_leading(data: &[f64], a: usize, b: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * inner;
            let d = (j * a + i) * inner;
            out[d..d + inner].copy_from_slice(&data[s..s + inner]);
        }
    }
    out
}

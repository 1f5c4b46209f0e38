//! Reference convolution operators on `(N, C, T, H, W)` tensors.
//!
//! Everything here is a direct loop evaluation of the 3D cross-correlation
//! with zero padding, spatial stride and per-axis dilation, and no bias.
//! These loops are the ground truth the fast paths are checked against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_t: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_t: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation_t: usize,
    pub dilation_h: usize,
    pub dilation_w: usize,
}

impl ConvSpec {
    /// Kernel `kt × kh × kw`, unit stride and dilation, "same" zero padding.
    pub fn same(kernel_t: usize, kernel_h: usize, kernel_w: usize) -> Self {
        ConvSpec {
            kernel_t,
            kernel_h,
            kernel_w,
            stride_h: 1,
            stride_w: 1,
            pad_t: (kernel_t.saturating_sub(1)) / 2,
            pad_h: (kernel_h.saturating_sub(1)) / 2,
            pad_w: (kernel_w.saturating_sub(1)) / 2,
            dilation_t: 1,
            dilation_h: 1,
            dilation_w: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride_h = stride;
        self.stride_w = stride;
        self
    }

    /// Temporal dilation with the matching same-length padding.
    pub fn with_temporal_dilation(mut self, d: usize) -> Self {
        self.dilation_t = d;
        self.pad_t = d * (self.kernel_t.saturating_sub(1)) / 2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = [self.kernel_t, self.kernel_h, self.kernel_w];
        if k.iter().any(|&v| v == 0) {
            return Err(Error::InvalidArgument(format!("zero kernel extent in {k:?}")));
        }
        if k.iter().any(|&v| v % 2 == 0) {
            return Err(Error::InvalidArgument(format!("even kernel extent in {k:?}")));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.dilation_t == 0 || self.dilation_h == 0 || self.dilation_w == 0 {
            return Err(Error::InvalidArgument("dilation must be >= 1".into()));
        }
        Ok(())
    }

    /// Output extents `(T', H', W')` for an input of extent `(t, h, w)`.
    pub fn output_dims(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let axis = |n: usize, k: usize, pad: usize, dil: usize, stride: usize, name: &str| {
            let extent = (k - 1) * dil + 1;
            let padded = n + 2 * pad;
            if extent > padded {
                return Err(Error::InvalidArgument(format!(
                    "{name}: kernel extent {extent} exceeds padded input {padded}"
                )));
            }
            Ok((padded - extent) / stride + 1)
        };
        Ok((
            axis(t, self.kernel_t, self.pad_t, self.dilation_t, 1, "time")?,
            axis(h, self.kernel_h, self.pad_h, self.dilation_h, self.stride_h, "height")?,
            axis(w, self.kernel_w, self.pad_w, self.dilation_w, self.stride_w, "width")?,
        ))
    }

    /// MACs of a dense 3D convolution with this kernel.
    pub fn macs(&self, c_in: usize, c_out: usize, out: (usize, usize, usize)) -> u64 {
        (c_out * c_in) as u64
            * (out.0 * out.1 * out.2) as u64
            * (self.kernel_t * self.kernel_h * self.kernel_w) as u64
    }
}

/// Dense 3D weights of shape `(C_o, C_i, K_T, K_H, K_W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights3D(Tensor);

impl Weights3D {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.dims().len() != 5 {
            return Err(Error::ShapeMismatch(format!("weights must be rank 5, got {:?}", t.dims())));
        }
        if !t.is_finite() {
            return Err(Error::InvalidArgument("non-finite weights".into()));
        }
        Ok(Weights3D(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn c_out(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[2], d[3], d[4])
    }
}

struct Problem {
    n: usize,
    ci: usize,
    co: usize,
    t: usize,
    h: usize,
    w: usize,
    to: usize,
    ho: usize,
    wo: usize,
}

fn check(input: &Tensor, w: &Weights3D, spec: &ConvSpec) -> Result<Problem> {
    let d = input.dims();
    if d.len() != 5 {
        return Err(Error::ShapeMismatch(format!("input must be rank 5, got {d:?}")));
    }
    if w.kernel() != (spec.kernel_t, spec.kernel_h, spec.kernel_w) {
        return Err(Error::ShapeMismatch(format!(
            "weights kernel {:?} vs spec {:?}",
            w.kernel(),
            (spec.kernel_t, spec.kernel_h, spec.kernel_w)
        )));
    }
    if w.c_in() != d[1] {
        return Err(Error::ShapeMismatch(format!(
            "weights expect {} input channels, input has {}",
            w.c_in(),
            d[1]
        )));
    }
    let (to, ho, wo) = spec.output_dims(d[2], d[3], d[4])?;
    Ok(Problem {
        n: d[0],
        ci: d[1],
        co: w.c_out(),
        t: d[2],
        h: d[3],
        w: d[4],
        to,
        ho,
        wo,
    })
}

/// Source coordinate of tap `k` for output position `o`, or `None` in the padding.
#[inline]
fn src(o: usize, stride: usize, k: usize, dil: usize, pad: usize, n: usize) -> Option<usize> {
    let p = (o * stride + k * dil) as isize - pad as isize;
    (p >= 0 && (p as usize) < n).then_some(p as usize)
}

/// Direct evaluation of the 3D cross-correlation.
pub fn conv3d_naive(input: &Tensor, w: &Weights3D, spec: &ConvSpec) -> Result<Tensor> {
    conv3d_naive_counted(input, w, spec).map(|(t, _)| t)
}

/// As [`conv3d_naive`], also returning the number of multiply-accumulates
/// executed (padding taps included).
pub fn conv3d_naive_counted(input: &Tensor, w: &Weights3D, spec: &ConvSpec) -> Result<(Tensor, u64)> {
    let p = check(input, w, spec)?;
    let (kt, kh, kw) = w.kernel();
    let x = input.data();
    let wt = w.tensor().data();
    let mut out = vec![0.0; p.n * p.co * p.to * p.ho * p.wo];
    let mut macs = 0u64;
    let mut o = 0;
    for n in 0..p.n {
        for m in 0..p.co {
            for t in 0..p.to {
                for h in 0..p.ho {
                    for ww in 0..p.wo {
                        let mut acc = 0.0;
                        for c in 0..p.ci {
                            for k in 0..kt {
                                let ts = src(t, 1, k, spec.dilation_t, spec.pad_t, p.t);
                                for i in 0..kh {
                                    let hs = src(h, spec.stride_h, i, spec.dilation_h, spec.pad_h, p.h);
                                    for j in 0..kw {
                                        macs += 1;
                                        let ws = src(ww, spec.stride_w, j, spec.dilation_w, spec.pad_w, p.w);
                                        if let (Some(ts), Some(hs), Some(ws)) = (ts, hs, ws) {
                                            let xi = (((n * p.ci + c) * p.t + ts) * p.h + hs) * p.w + ws;
                                            let wi = (((m * p.ci + c) * kt + k) * kh + i) * kw + j;
                                            acc += wt[wi] * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                        out[o] = acc;
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[p.n, p.co, p.to, p.ho, p.wo], out)?, macs))
}

/// Exact adjoint of [`conv3d_naive`]: returns `(grad_input, grad_weights)`.
pub fn conv3d_backward(
    input: &Tensor,
    w: &Weights3D,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let p = check(input, w, spec)?;
    if grad_out.dims() != [p.n, p.co, p.to, p.ho, p.wo] {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {:?}, forward output is {:?}",
            grad_out.dims(),
            [p.n, p.co, p.to, p.ho, p.wo]
        )));
    }
    let (kt, kh, kw) = w.kernel();
    let x = input.data();
    let wt = w.tensor().data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut o = 0;
    for n in 0..p.n {
        for m in 0..p.co {
            for t in 0..p.to {
                for h in 0..p.ho {
                    for ww in 0..p.wo {
                        let go = g[o];
                        o += 1;
                        if go == 0.0 {
                            continue;
                        }
                        for c in 0..p.ci {
                            for k in 0..kt {
                                let Some(ts) = src(t, 1, k, spec.dilation_t, spec.pad_t, p.t) else {
                                    continue;
                                };
                                for i in 0..kh {
                                    let Some(hs) = src(h, spec.stride_h, i, spec.dilation_h, spec.pad_h, p.h) else {
                                        continue;
                                    };
                                    for j in 0..kw {
                                        let Some(ws) = src(ww, spec.stride_w, j, spec.dilation_w, spec.pad_w, p.w) else {
                                            continue;
                                        };
                                        let xi = (((n * p.ci + c) * p.t + ts) * p.h + hs) * p.w + ws;
                                        let wi = (((m * p.ci + c) * kt + k) * kh + i) * kw + j;
                                        gw[wi] += go * x[xi];
                                        gx[xi] += go * wt[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(input.dims(), gx)?,
        Tensor::from_vec(w.tensor().dims(), gw)?,
    ))
}

/// Frame-wise 2D convolution: a 3D convolution with `K_T = 1`.
pub fn conv2d_spatial(input: &Tensor, w: &Weights3D, spec: &ConvSpec) -> Result<Tensor> {
    if spec.kernel_t != 1 || spec.pad_t != 0 {
        return Err(Error::InvalidArgument("spatial conv needs kernel_t = 1, pad_t = 0".into()));
    }
    conv3d_naive(input, w, spec)
}

/// Per-pixel temporal convolution: a 3D convolution with `K_H = K_W = 1`.
pub fn conv1d_temporal(input: &Tensor, w: &Weights3D, spec: &ConvSpec) -> Result<Tensor> {
    if spec.kernel_h != 1 || spec.kernel_w != 1 || spec.pad_h != 0 || spec.pad_w != 0 {
        return Err(Error::InvalidArgument(
            "temporal conv needs 1x1 spatial kernel without spatial padding".into(),
        ));
    }
    conv3d_naive(input, w, spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factorization {
    /// temporal conv applied to the output of the spatial conv
    Sequential,
    /// spatial and temporal convs on the same input, summed
    Parallel,
}

impl ConvSpec {
    /// The `1 × K_H × K_W` part of this spec.
    pub fn spatial_part(&self) -> ConvSpec {
        ConvSpec {
            kernel_t: 1,
            pad_t: 0,
            dilation_t: 1,
            ..*self
        }
    }

    /// The `K_T × 1 × 1` part of this spec; the spatial stride is kept, so the
    /// temporal kernel samples the same strided grid as the spatial one.
    pub fn temporal_part(&self) -> ConvSpec {
        ConvSpec {
            kernel_h: 1,
            kernel_w: 1,
            pad_h: 0,
            pad_w: 0,
            dilation_h: 1,
            dilation_w: 1,
            ..*self
        }
    }
}

/// (2+1)D block: `spec` supplies the spatial kernel (`K_H × K_W`, stride) and
/// the temporal kernel (`K_T`, dilation).
pub fn conv2plus1d(
    input: &Tensor,
    w_s: &Weights3D,
    w_t: &Weights3D,
    mode: Factorization,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let spatial = conv2d_spatial(input, w_s, &spec.spatial_part())?;
    match mode {
        Factorization::Sequential => {
            if w_t.c_in() != w_s.c_out() || w_t.c_out() != w_s.c_out() {
                return Err(Error::ShapeMismatch(
                    "sequential: temporal weights must map C_o -> C_o".into(),
                ));
            }
            conv1d_temporal(&spatial, w_t, &spec.temporal_part().with_stride(1))
        }
        Factorization::Parallel => {
            if w_t.c_in() != w_s.c_in() || w_t.c_out() != w_s.c_out() {
                return Err(Error::ShapeMismatch(
                    "parallel: temporal weights must map C_i -> C_o".into(),
                ));
            }
            let temporal = conv1d_temporal(input, w_t, &spec.temporal_part())?;
            spatial.add(&temporal)
        }
    }
}

//! Spatio-temporal hybrid convolution.
//!
//! Each output channel `m` of kernel type `g` sums a temporal `K_T × 1 × 1`
//! convolution over the input channels of `temporal_span(g)` (`O_T`) and a
//! spatial `1 × K_H × K_W` convolution over the remaining channels (`O_S`).
//! The two partial maps are fused either by plain addition or by
//! per-channel attention weights `α_T + α_S = 1`.
//!
//! Weights are stored densely with masks: `w_spatial` is
//! `(C_o, C_i, 1, K_H, K_W)` and `w_temporal` is `(C_o, C_i, K_T, 1, 1)`,
//! with the entries outside each channel's spatial/temporal support held at
//! zero.

use crate::conv::{ConvSpec, Weights3D};
use crate::error::{Error, Result};
use crate::gemm::{gemm, View};
use crate::im2col::{col2im_add, frame_tiles, im2col, swap_leading, Geom};
use crate::layout::HybridLayout;
use crate::param::{Param, ParamKind};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;

/// Attention producing `α_T, α_S` from the fused descriptor.
///
/// Squeeze `O_S + O_T` by global average over `(T, H, W)`, reduce
/// `C_o → C_o/r` with ReLU, expand with two heads `C_o/r → C_o`, and take a
/// two-way softmax per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub r: usize,
    /// `(C_o, C_o/r)`
    pub reduce: Param,
    pub reduce_bias: Param,
    /// `(C_o/r, C_o)`
    pub head_t: Param,
    pub head_t_bias: Param,
    pub head_s: Param,
    pub head_s_bias: Param,
}

impl AttentionParams {
    pub fn new(prefix: &str, c_out: usize, r: usize, rng: &mut Rng) -> Result<Self> {
        if r == 0 || c_out % r != 0 {
            return Err(Error::InvalidArgument(format!(
                "reduction ratio {r} does not divide C_o = {c_out}"
            )));
        }
        let hidden = c_out / r;
        let p = |name: &str, kind, dims: &[usize]| {
            Param::new(format!("{prefix}.{name}"), kind, Tensor::zeros(dims).expect("positive dims"))
        };
        let mut a = AttentionParams {
            r,
            reduce: p("attn.reduce", ParamKind::AttnWeight, &[c_out, hidden]),
            reduce_bias: p("attn.reduce_bias", ParamKind::AttnBias, &[hidden]),
            head_t: p("attn.head_t", ParamKind::AttnWeight, &[hidden, c_out]),
            head_t_bias: p("attn.head_t_bias", ParamKind::AttnBias, &[c_out]),
            head_s: p("attn.head_s", ParamKind::AttnWeight, &[hidden, c_out]),
            head_s_bias: p("attn.head_s_bias", ParamKind::AttnBias, &[c_out]),
        };
        a.reduce.init_uniform(rng, 1.0 / (c_out as f64).sqrt());
        a.head_t.init_uniform(rng, 1.0 / (hidden as f64).sqrt());
        a.head_s.init_uniform(rng, 1.0 / (hidden as f64).sqrt());
        Ok(a)
    }

    pub fn c_out(&self) -> usize {
        self.reduce.value.dims()[0]
    }

    pub fn hidden(&self) -> usize {
        self.reduce.value.dims()[1]
    }

    /// Copy the temporal head onto the spatial head, so that `α_T = α_S = 1/2`.
    pub fn symmetrize(&mut self) {
        self.head_s.value = self.head_t.value.clone();
        self.head_s_bias.value = self.head_t_bias.value.clone();
    }

    pub fn params(&self) -> [&Param; 6] {
        [&self.reduce, &self.reduce_bias, &self.head_t, &self.head_t_bias, &self.head_s, &self.head_s_bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 6] {
        [
            &mut self.reduce,
            &mut self.reduce_bias,
            &mut self.head_t,
            &mut self.head_t_bias,
            &mut self.head_s,
            &mut self.head_s_bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Dilation schedule of the temporal kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelType {
    /// dilation 1 everywhere
    Fixed,
    /// dilation cycles 1, 2, 3 over successive hybrid layers
    Dilated,
}

impl FromStr for KernelType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fixed" => Ok(KernelType::Fixed),
            "dilated" => Ok(KernelType::Dilated),
            other => Err(Error::InvalidArgument(format!("unknown kernel type {other:?}"))),
        }
    }
}

impl fmt::Display for KernelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelType::Fixed => "fixed",
            KernelType::Dilated => "dilated",
        })
    }
}

/// Temporal dilation of the `layer_index`-th hybrid layer in network order.
pub fn dilation_schedule(layer_index: usize, kernel_type: KernelType) -> usize {
    match kernel_type {
        KernelType::Fixed => 1,
        KernelType::Dilated => 1 + layer_index % 3,
    }
}

/// Parameters and geometry of one hybrid convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SthLayer {
    pub layout: HybridLayout,
    /// `kernel_t` and `dilation_t` drive the temporal part, `kernel_h/w`,
    /// padding and stride the spatial part; the stride also applies to the
    /// temporal kernels.
    pub spec: ConvSpec,
    pub w_spatial: Param,
    pub w_temporal: Param,
    pub attn: Option<AttentionParams>,
}

/// Saved forward state of [`SthLayer`] on channel-major activations.
#[derive(Debug, Clone)]
pub(crate) struct BranchCache {
    gs: Geom,
    gt: Geom,
    s_chan: (usize, usize),
    t_chan: (usize, usize),
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    n: usize,
    plane: usize,
    z: Vec<f64>,
    pre: Vec<f64>,
    u: Vec<f64>,
    pub alpha_t: Vec<f64>,
    pub alpha_s: Vec<f64>,
}

pub(crate) fn spatial_mask(layout: &HybridLayout, kh: usize, kw: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(layout.c_out * layout.c_in * kh * kw);
    for m in 0..layout.c_out {
        for c in 0..layout.c_in {
            let live = !layout.is_temporal(m, c);
            mask.extend(std::iter::repeat_n(live, kh * kw));
        }
    }
    mask
}

pub(crate) fn temporal_mask(layout: &HybridLayout, kt: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(layout.c_out * layout.c_in * kt);
    for m in 0..layout.c_out {
        for c in 0..layout.c_in {
            let live = layout.is_temporal(m, c);
            mask.extend(std::iter::repeat_n(live, kt));
        }
    }
    mask
}

impl SthLayer {
    /// Zero-initialized layer; call [`SthLayer::init`] for random weights.
    pub fn new(name: &str, layout: HybridLayout, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let same = spec.dilation_h == 1
            && spec.dilation_w == 1
            && spec.pad_h == (spec.kernel_h - 1) / 2
            && spec.pad_w == (spec.kernel_w - 1) / 2
            && spec.pad_t == spec.dilation_t * (spec.kernel_t - 1) / 2;
        if !same {
            return Err(Error::InvalidArgument(format!(
                "hybrid layers need same padding and undilated spatial kernels, got {spec:?}"
            )));
        }
        let (co, ci) = (layout.c_out, layout.c_in);
        let (kt, kh, kw) = (spec.kernel_t, spec.kernel_h, spec.kernel_w);
        let w_spatial = Param::new(
            format!("{name}.w_spatial"),
            ParamKind::ConvWeight,
            Tensor::zeros(&[co, ci, 1, kh, kw])?,
        )
        .with_mask(spatial_mask(&layout, kh, kw))?;
        let w_temporal = Param::new(
            format!("{name}.w_temporal"),
            ParamKind::ConvWeight,
            Tensor::zeros(&[co, ci, kt, 1, 1])?,
        )
        .with_mask(temporal_mask(&layout, kt))?;
        Ok(SthLayer { layout, spec, w_spatial, w_temporal, attn: None })
    }

    pub fn with_attention(mut self, r: usize, rng: &mut Rng) -> Result<Self> {
        let prefix = self.w_spatial.name.trim_end_matches(".w_spatial").to_string();
        self.attn = Some(AttentionParams::new(&prefix, self.layout.c_out, r, rng)?);
        Ok(self)
    }

    /// He-uniform init over the live fan-in of each output channel.
    pub fn init(&mut self, rng: &mut Rng) {
        let fan_in = self
            .layout
            .live_per_output(self.spec.kernel_t, self.spec.kernel_h, self.spec.kernel_w)
            .max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        self.w_spatial.init_uniform(rng, bound);
        self.w_temporal.init_uniform(rng, bound);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.w_spatial, &self.w_temporal];
        if let Some(a) = &self.attn {
            v.extend(a.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.w_spatial, &mut self.w_temporal];
        if let Some(a) = &mut self.attn {
            v.extend(a.params_mut());
        }
        v
    }

    /// Live convolution scalars: `C_o · (pC_i·K_T + (1−p)C_i·K_H·K_W)`.
    pub fn live_conv_params(&self) -> usize {
        self.w_spatial.live_count() + self.w_temporal.live_count()
    }

    pub(crate) fn geoms(&self, n: usize, t: usize, h: usize, w: usize) -> Result<(Geom, Geom)> {
        let ci = self.layout.c_in;
        let gs = Geom::new(self.spec.spatial_part(), ci, n, t, h, w)?;
        let gt = Geom::new(self.spec.temporal_part(), ci, n, t, h, w)?;
        if (gs.to, gs.ho, gs.wo) != (gt.to, gt.ho, gt.wo) {
            return Err(Error::ShapeMismatch(format!(
                "spatial output {:?} and temporal output {:?} differ",
                (gs.to, gs.ho, gs.wo),
                (gt.to, gt.ho, gt.wo)
            )));
        }
        Ok((gs, gt))
    }

    /// Channels needed by the spatial / temporal column matrices.
    fn channel_ranges(&self) -> ((usize, usize), (usize, usize)) {
        let ci = self.layout.c_in;
        let blocks = self.layout.blocks();
        let t_lo = blocks.iter().map(|b| b.temporal.start).min().unwrap_or(0);
        let t_hi = blocks.iter().map(|b| b.temporal.end).max().unwrap_or(0);
        let t = if t_hi > t_lo { (t_lo, t_hi) } else { (0, 0) };
        // spatial channels: union of complements
        let mut s_lo = ci;
        let mut s_hi = 0;
        for b in &blocks {
            if b.temporal.start > 0 {
                s_lo = 0;
                s_hi = s_hi.max(b.temporal.start);
            }
            if b.temporal.end < ci {
                s_lo = s_lo.min(b.temporal.end);
                s_hi = ci;
            }
        }
        let s = if s_hi > s_lo { (s_lo, s_hi) } else { (0, 0) };
        (s, t)
    }

    /// Both branch outputs on a `(C_i, N, T, H, W)` buffer; outputs are
    /// `(C_o, N, T', H', W')`.
    pub(crate) fn branches_cm(
        &self,
        x: &[f64],
        n: usize,
        t: usize,
        h: usize,
        w: usize,
    ) -> Result<(Vec<f64>, Vec<f64>, BranchCache)> {
        let (gs, gt) = self.geoms(n, t, h, w)?;
        if x.len() != self.layout.c_in * gs.in_cols() {
            return Err(Error::ShapeMismatch("input length does not match layer".into()));
        }
        let (s_chan, t_chan) = self.channel_ranges();
        let cols = gs.out_cols();
        let plane = gs.ho * gs.wo;
        let co = self.layout.c_out;
        let (ci, ks, kt) = (self.layout.c_in, gs.kvol(), gt.kvol());
        let (s_rows, t_rows) = ((s_chan.1 - s_chan.0) * ks, (t_chan.1 - t_chan.0) * kt);
        // Weights are zero outside their support, so each branch is one
        // dense product over the channels it touches.
        let ws = View::row_major(self.w_spatial.value.data(), co, ci * ks).block(0, co, s_chan.0 * ks, s_rows);
        let wt = View::row_major(self.w_temporal.value.data(), co, ci * kt).block(0, co, t_chan.0 * kt, t_rows);
        let mut os = vec![0.0; co * cols];
        let mut ot = vec![0.0; co * cols];
        let (mut col_s, mut col_t) = (Vec::new(), Vec::new());
        for frames in frame_tiles(&gs, s_rows + t_rows) {
            let tc = (frames.1 - frames.0) * plane;
            let off = frames.0 * plane;
            if s_rows > 0 {
                im2col(x, &gs, s_chan, frames, &mut col_s);
                gemm(1.0, ws, View::row_major(&col_s, s_rows, tc), 0.0, &mut os[off..], cols);
            }
            if t_rows > 0 {
                im2col(x, &gt, t_chan, frames, &mut col_t);
                gemm(1.0, wt, View::row_major(&col_t, t_rows, tc), 0.0, &mut ot[off..], cols);
            }
        }
        Ok((os, ot, BranchCache { gs, gt, s_chan, t_chan }))
    }

    /// Adjoint of [`SthLayer::branches_cm`] given the same input `x`. Weight
    /// gradients are accumulated into the parameters (live entries only);
    /// returns the input gradient.
    pub(crate) fn branches_backward_cm(
        &mut self,
        cache: &BranchCache,
        x: &[f64],
        g_os: &[f64],
        g_ot: &[f64],
        need_gx: bool,
    ) -> Option<Vec<f64>> {
        let BranchCache { gs, gt, s_chan, t_chan } = cache;
        let (s_chan, t_chan) = (*s_chan, *t_chan);
        let cols = gs.out_cols();
        let plane = gs.ho * gs.wo;
        let co = self.layout.c_out;
        let (ci, ks, kt) = (self.layout.c_in, gs.kvol(), gt.kvol());
        let s_rows = (s_chan.1 - s_chan.0) * ks;
        let t_rows = (t_chan.1 - t_chan.0) * kt;
        let gsv = View::row_major(g_os, co, cols);
        let gtv = View::row_major(g_ot, co, cols);
        let mut gws = vec![0.0; co * ci * ks];
        let mut gwt = vec![0.0; co * ci * kt];
        let mut gx = need_gx.then(|| vec![0.0; ci * gs.in_cols()]);
        let (mut col, mut gcol) = (Vec::new(), Vec::new());
        let ws = View::row_major(self.w_spatial.value.data(), co, ci * ks).block(0, co, s_chan.0 * ks, s_rows);
        let wt = View::row_major(self.w_temporal.value.data(), co, ci * kt).block(0, co, t_chan.0 * kt, t_rows);
        let branches = [(gs, s_chan, s_rows, ws, gsv, &mut gws, ks), (gt, t_chan, t_rows, wt, gtv, &mut gwt, kt)];
        for (g, chan, rows, w, gv, gw, k) in branches {
            if rows == 0 {
                continue;
            }
            for frames in frame_tiles(g, rows) {
                let tc = (frames.1 - frames.0) * plane;
                let g_tile = gv.block(0, co, frames.0 * plane, tc);
                im2col(x, g, chan, frames, &mut col);
                gemm(1.0, g_tile, View::row_major(&col, rows, tc).t(), 1.0, &mut gw[chan.0 * k..], ci * k);
                if let Some(gx) = gx.as_mut() {
                    gcol.clear();
                    gcol.resize(rows * tc, 0.0);
                    gemm(1.0, w.t(), g_tile, 0.0, &mut gcol, tc);
                    col2im_add(&gcol, g, chan, frames, gx);
                }
            }
        }
        self.w_spatial.accumulate(&gws);
        self.w_temporal.accumulate(&gwt);
        gx
    }
}

/// Attention fusion on channel-major `(C_o, N, plane)` branch outputs.
pub(crate) fn attn_forward_cm(
    a: &AttentionParams,
    os: &[f64],
    ot: &[f64],
    n: usize,
    plane: usize,
) -> (Vec<f64>, AttnCache) {
    let co = a.c_out();
    let hid = a.hidden();
    let r = a.reduce.value.data();
    let br = a.reduce_bias.value.data();
    let (ht, bt) = (a.head_t.value.data(), a.head_t_bias.value.data());
    let (hs, bs) = (a.head_s.value.data(), a.head_s_bias.value.data());
    let inv = 1.0 / plane as f64;
    let mut z = vec![0.0; n * co];
    for m in 0..co {
        for s in 0..n {
            let off = (m * n + s) * plane;
            let sum: f64 = os[off..off + plane].iter().zip(&ot[off..off + plane]).map(|(a, b)| a + b).sum();
            z[s * co + m] = sum * inv;
        }
    }
    let mut pre = vec![0.0; n * hid];
    let mut u = vec![0.0; n * hid];
    let mut alpha_t = vec![0.0; n * co];
    let mut alpha_s = vec![0.0; n * co];
    for s in 0..n {
        for j in 0..hid {
            let mut acc = br[j];
            for m in 0..co {
                acc += z[s * co + m] * r[m * hid + j];
            }
            pre[s * hid + j] = acc;
            u[s * hid + j] = acc.max(0.0);
        }
        for m in 0..co {
            let mut lt = bt[m];
            let mut ls = bs[m];
            for j in 0..hid {
                let uj = u[s * hid + j];
                lt += uj * ht[j * co + m];
                ls += uj * hs[j * co + m];
            }
            let mx = lt.max(ls);
            let (et, es) = ((lt - mx).exp(), (ls - mx).exp());
            let den = et + es;
            alpha_t[s * co + m] = et / den;
            alpha_s[s * co + m] = es / den;
        }
    }
    let mut out = vec![0.0; os.len()];
    for m in 0..co {
        for s in 0..n {
            let (at, as_) = (alpha_t[s * co + m], alpha_s[s * co + m]);
            let off = (m * n + s) * plane;
            for q in off..off + plane {
                out[q] = at * ot[q] + as_ * os[q];
            }
        }
    }
    (out, AttnCache { n, plane, z, pre, u, alpha_t, alpha_s })
}

/// Adjoint of [`attn_forward_cm`]; accumulates parameter gradients and
/// returns `(grad_os, grad_ot)`.
pub(crate) fn attn_backward_cm(
    a: &mut AttentionParams,
    os: &[f64],
    ot: &[f64],
    cache: &AttnCache,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let co = a.c_out();
    let hid = a.hidden();
    let AttnCache { n, plane, z, pre, u, alpha_t, alpha_s } = cache;
    let (n, plane) = (*n, *plane);
    let mut ga_t = vec![0.0; n * co];
    let mut ga_s = vec![0.0; n * co];
    for m in 0..co {
        for s in 0..n {
            let off = (m * n + s) * plane;
            let (mut at, mut as_) = (0.0, 0.0);
            for q in off..off + plane {
                at += g[q] * ot[q];
                as_ += g[q] * os[q];
            }
            ga_t[s * co + m] = at;
            ga_s[s * co + m] = as_;
        }
    }
    let mut d_lt = vec![0.0; n * co];
    let mut d_ls = vec![0.0; n * co];
    for i in 0..n * co {
        let s = alpha_t[i] * ga_t[i] + alpha_s[i] * ga_s[i];
        d_lt[i] = alpha_t[i] * (ga_t[i] - s);
        d_ls[i] = alpha_s[i] * (ga_s[i] - s);
    }
    let mut g_ht = vec![0.0; hid * co];
    let mut g_hs = vec![0.0; hid * co];
    let mut g_bt = vec![0.0; co];
    let mut g_bs = vec![0.0; co];
    let mut g_pre = vec![0.0; n * hid];
    {
        let ht = a.head_t.value.data();
        let hs = a.head_s.value.data();
        for s in 0..n {
            for m in 0..co {
                g_bt[m] += d_lt[s * co + m];
                g_bs[m] += d_ls[s * co + m];
            }
            for j in 0..hid {
                let uj = u[s * hid + j];
                let mut gu = 0.0;
                for m in 0..co {
                    g_ht[j * co + m] += uj * d_lt[s * co + m];
                    g_hs[j * co + m] += uj * d_ls[s * co + m];
                    gu += ht[j * co + m] * d_lt[s * co + m] + hs[j * co + m] * d_ls[s * co + m];
                }
                g_pre[s * hid + j] = if pre[s * hid + j] > 0.0 { gu } else { 0.0 };
            }
        }
    }
    let mut g_r = vec![0.0; co * hid];
    let mut g_br = vec![0.0; hid];
    let mut gz = vec![0.0; n * co];
    {
        let r = a.reduce.value.data();
        for s in 0..n {
            for j in 0..hid {
                g_br[j] += g_pre[s * hid + j];
            }
            for m in 0..co {
                let mut acc = 0.0;
                for j in 0..hid {
                    g_r[m * hid + j] += z[s * co + m] * g_pre[s * hid + j];
                    acc += r[m * hid + j] * g_pre[s * hid + j];
                }
                gz[s * co + m] = acc;
            }
        }
    }
    a.reduce.accumulate(&g_r);
    a.reduce_bias.accumulate(&g_br);
    a.head_t.accumulate(&g_ht);
    a.head_t_bias.accumulate(&g_bt);
    a.head_s.accumulate(&g_hs);
    a.head_s_bias.accumulate(&g_bs);

    let inv = 1.0 / plane as f64;
    let mut g_os = vec![0.0; g.len()];
    let mut g_ot = vec![0.0; g.len()];
    for m in 0..co {
        for s in 0..n {
            let i = s * co + m;
            let (at, as_, gzp) = (alpha_t[i], alpha_s[i], gz[i] * inv);
            let off = (m * n + s) * plane;
            for q in off..off + plane {
                g_ot[q] = at * g[q] + gzp;
                g_os[q] = as_ * g[q] + gzp;
            }
        }
    }
    (g_os, g_ot)
}

// ---------------------------------------------------------------------------
// Public operators on (N, C, T, H, W) tensors.

fn check_layer_input(layer: &SthLayer, input: &Tensor) -> Result<[usize; 5]> {
    let d = input.dims();
    if d.len() != 5 || d[1] != layer.layout.c_in {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not match layer with {} input channels",
            d, layer.layout.c_in
        )));
    }
    Ok([d[0], d[1], d[2], d[3], d[4]])
}

fn to_cm(input: &Tensor) -> Vec<f64> {
    let d = input.dims();
    swap_leading(input.data(), d[0], d[1], d[2..].iter().product())
}

fn from_cm(data: &[f64], c: usize, n: usize, rest: [usize; 3]) -> Result<Tensor> {
    let inner = rest.iter().product();
    Tensor::from_vec(&[n, c, rest[0], rest[1], rest[2]], swap_leading(data, c, n, inner))
}

fn check_masks(layer: &SthLayer) -> Result<()> {
    for p in [&layer.w_spatial, &layer.w_temporal] {
        let data = p.value.data();
        if (0..data.len()).any(|i| !p.is_live(i) && data[i] != 0.0) {
            return Err(Error::Layout(format!("{}: nonzero weight outside its support", p.name)));
        }
    }
    Ok(())
}

/// Hybrid convolution branches `(O_S, O_T)`, each `(N, C_o, T', H', W')`.
pub fn sth_forward(input: &Tensor, layer: &SthLayer) -> Result<(Tensor, Tensor)> {
    let [n, _, t, h, w] = check_layer_input(layer, input)?;
    check_masks(layer)?;
    let (os, ot, cache) = layer.branches_cm(&to_cm(input), n, t, h, w)?;
    let rest = [cache.gs.to, cache.gs.ho, cache.gs.wo];
    let co = layer.layout.c_out;
    Ok((from_cm(&os, co, n, rest)?, from_cm(&ot, co, n, rest)?))
}

/// Same as [`sth_forward`] but insists on a merge layout.
pub fn sth_merge_forward(input: &Tensor, layer: &SthLayer) -> Result<(Tensor, Tensor)> {
    if layer.layout.variant != crate::layout::Variant::Merge {
        return Err(Error::Layout("sth_merge_forward needs a merge layout".into()));
    }
    sth_forward(input, layer)
}

/// Embed the layer into dense 3D weights `(C_o, C_i, K_T, K_H, K_W)`: spatial
/// kernels sit at the temporal centre tap, temporal kernels at the spatial
/// centre tap, everything else is zero.
pub fn expand_to_masked_3d(layer: &SthLayer) -> Result<Weights3D> {
    let (co, ci) = (layer.layout.c_out, layer.layout.c_in);
    let (kt, kh, kw) = (layer.spec.kernel_t, layer.spec.kernel_h, layer.spec.kernel_w);
    let mut w = vec![0.0; co * ci * kt * kh * kw];
    let ws = layer.w_spatial.value.data();
    let wt = layer.w_temporal.value.data();
    let (ct, ch, cw) = ((kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    for m in 0..co {
        for c in 0..ci {
            let base = (m * ci + c) * kt * kh * kw;
            if layer.layout.is_temporal(m, c) {
                for k in 0..kt {
                    w[base + (k * kh + ch) * kw + cw] = wt[(m * ci + c) * kt + k];
                }
            } else {
                for i in 0..kh {
                    for j in 0..kw {
                        w[base + (ct * kh + i) * kw + j] = ws[((m * ci + c) * kh + i) * kw + j];
                    }
                }
            }
        }
    }
    Weights3D::new(Tensor::from_vec(&[co, ci, kt, kh, kw], w)?)
}

/// Spec of the dense 3D convolution equivalent to the layer.
pub fn masked_3d_spec(layer: &SthLayer) -> ConvSpec {
    layer.spec
}

/// Per-sample attention output: `O_hat`, `α_S` and `α_T` as `(N, C_o)`.
pub fn attentive_integrate(
    o_s: &Tensor,
    o_t: &Tensor,
    attn: &AttentionParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = o_s.dims();
    if d != o_t.dims() || d.len() != 5 {
        return Err(Error::ShapeMismatch(format!("O_S {:?} vs O_T {:?}", d, o_t.dims())));
    }
    if d[1] != attn.c_out() {
        return Err(Error::ShapeMismatch(format!(
            "attention built for {} channels, maps have {}",
            attn.c_out(),
            d[1]
        )));
    }
    let (n, co) = (d[0], d[1]);
    let rest = [d[2], d[3], d[4]];
    let (out, cache) = attn_forward_cm(attn, &to_cm(o_s), &to_cm(o_t), n, rest.iter().product());
    Ok((
        from_cm(&out, co, n, rest)?,
        Tensor::from_vec(&[n, co], cache.alpha_s)?,
        Tensor::from_vec(&[n, co], cache.alpha_t)?,
    ))
}

/// Forward state needed by [`sth_backward`].
#[derive(Debug, Clone)]
pub struct SthState {
    n: usize,
    x: Vec<f64>,
    branch: BranchCache,
    os: Vec<f64>,
    ot: Vec<f64>,
    attn: Option<AttnCache>,
}

impl SthState {
    /// `(α_S, α_T)` as `(N, C_o)` tensors when attention is enabled.
    pub fn alphas(&self) -> Option<(Tensor, Tensor)> {
        self.attn.as_ref().map(|a| {
            let co = a.alpha_t.len() / self.n;
            (
                Tensor::from_vec(&[self.n, co], a.alpha_s.clone()).expect("alpha shape"),
                Tensor::from_vec(&[self.n, co], a.alpha_t.clone()).expect("alpha shape"),
            )
        })
    }
}

/// Gradients of a hybrid layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SthGrads {
    pub w_spatial: Tensor,
    pub w_temporal: Tensor,
    /// In [`AttentionParams::params`] order.
    pub attn: Option<Vec<Tensor>>,
}

/// Fused layer output (`O_S + O_T`, or attentive fusion when the layer has
/// attention) plus the state for [`sth_backward`].
pub fn sth_layer_forward(input: &Tensor, layer: &SthLayer) -> Result<(Tensor, SthState)> {
    let [n, _, t, h, w] = check_layer_input(layer, input)?;
    let x = to_cm(input);
    let (os, ot, branch) = layer.branches_cm(&x, n, t, h, w)?;
    let rest = [branch.gs.to, branch.gs.ho, branch.gs.wo];
    let plane = rest.iter().product();
    let (out, attn) = match &layer.attn {
        Some(a) => {
            let (o, c) = attn_forward_cm(a, &os, &ot, n, plane);
            (o, Some(c))
        }
        None => (os.iter().zip(&ot).map(|(a, b)| a + b).collect(), None),
    };
    let out = from_cm(&out, layer.layout.c_out, n, rest)?;
    Ok((out, SthState { n, x, branch, os, ot, attn }))
}

/// Exact gradients of [`sth_layer_forward`] for an upstream gradient `grad_out`.
pub fn sth_backward(layer: &SthLayer, state: &SthState, grad_out: &Tensor) -> Result<(Tensor, SthGrads)> {
    let co = layer.layout.c_out;
    let g = &state.branch.gs;
    let want = [state.n, co, g.to, g.ho, g.wo];
    if grad_out.dims() != want {
        return Err(Error::ShapeMismatch(format!("grad_out {:?}, expected {:?}", grad_out.dims(), want)));
    }
    let mut work = layer.clone();
    for p in work.params_mut() {
        p.zero_grad();
    }
    let g_cm = to_cm(grad_out);
    let (g_os, g_ot) = match (&mut work.attn, &state.attn) {
        (Some(a), Some(c)) => attn_backward_cm(a, &state.os, &state.ot, c, &g_cm),
        (None, None) => (g_cm.clone(), g_cm),
        _ => return Err(Error::InvalidArgument("attention state does not match layer".into())),
    };
    let gx = work
        .branches_backward_cm(&state.branch, &state.x, &g_os, &g_ot, true)
        .expect("input gradient requested");
    let gx = from_cm(&gx, layer.layout.c_in, state.n, [g.t, g.h, g.w])?;
    let grads = SthGrads {
        w_spatial: work.w_spatial.grad.clone(),
        w_temporal: work.w_temporal.grad.clone(),
        attn: work.attn.as_ref().map(|a| a.params().iter().map(|p| p.grad.clone()).collect()),
    };
    Ok((gx, grads))
}

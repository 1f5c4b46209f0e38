//! The hybrid-convolution video network: a ResNet-50 style stack whose 3×3
//! cores are hybrid convolutions, followed by spatial average pooling, a
//! per-frame classifier and average consensus over frames.
//!
//! Activations are carried channel-major `(C, N, T, H, W)` between layers.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::im2col::{conv_backward, conv_forward, swap_leading, Geom};
use crate::layout::{build_layout_with, Proportion, Variant};
use crate::norm::{relu_backward, relu_inplace, BatchNorm, NormCache};
use crate::param::{Buffer, Param, ParamKind};
use crate::rng::Rng;
use crate::sth::{attn_backward_cm, attn_forward_cm, dilation_schedule, AttnCache, BranchCache, KernelType, SthLayer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub frames: usize,
    pub input_hw: usize,
    pub in_channels: usize,
    pub stem_width: usize,
    /// width of the hybrid core in each stage; block outputs are 4× this
    pub sth_widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub p: Proportion,
    pub kernel_type: KernelType,
    pub attention: bool,
    pub attention_reduction: usize,
    pub variant: Variant,
    pub num_class: usize,
    /// divides every channel width
    pub scale_factor: usize,
}

pub const EXPANSION: usize = 4;

impl NetworkConfig {
    /// The full-size stack: 8 frames of 224², hybrid cores at `p = 1/4`.
    pub fn full_size(num_class: usize) -> Self {
        NetworkConfig {
            frames: 8,
            input_hw: 224,
            in_channels: 3,
            stem_width: 64,
            sth_widths: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            p: Proportion::one_over(4).expect("nonzero"),
            kernel_type: KernelType::Fixed,
            attention: false,
            attention_reduction: 4,
            variant: Variant::Hybrid,
            num_class,
            scale_factor: 1,
        }
    }

    /// Scaled-down desk model: every width divided by `scale_factor`.
    pub fn desk(scale_factor: usize, input_hw: usize, frames: usize, num_class: usize) -> Self {
        NetworkConfig { frames, input_hw, scale_factor, ..NetworkConfig::full_size(num_class) }
    }

    pub fn stem_channels(&self) -> usize {
        self.stem_width / self.scale_factor
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.sth_widths[stage] / self.scale_factor
    }

    pub fn feature_channels(&self) -> usize {
        self.stage_width(self.sth_widths.len() - 1) * EXPANSION
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames == 0 || self.input_hw == 0 || self.in_channels == 0 || self.num_class == 0 {
            return bad("frames, input size, input channels and classes must be positive".into());
        }
        if self.scale_factor == 0 {
            return bad("scale_factor must be positive".into());
        }
        if self.sth_widths.len() != self.blocks.len() || self.blocks.is_empty() {
            return bad("stage widths and block counts must have the same nonzero length".into());
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return bad("every stage needs at least one block".into());
        }
        if self.stem_width % self.scale_factor != 0 {
            return bad(format!("stem width {} not divisible by scale {}", self.stem_width, self.scale_factor));
        }
        let g = self.p.groups();
        for &w in &self.sth_widths {
            if w % self.scale_factor != 0 {
                return bad(format!("width {w} not divisible by scale {}", self.scale_factor));
            }
            let w = w / self.scale_factor;
            if !self.p.is_zero() && w % g != 0 {
                return bad(format!("width {w} not divisible by the {g} kernel types"));
            }
            if self.attention && w % self.attention_reduction != 0 {
                return bad(format!("attention ratio {} does not divide {w}", self.attention_reduction));
            }
        }
        if self.p == Proportion::ONE {
            return bad("p = 1 is not a valid network setting".into());
        }
        Ok(())
    }
}

/// Kind of an entry in the layer plan.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv { kernel: (usize, usize, usize), stride: usize },
    Hybrid { p: Proportion, variant: Variant, dilation: usize, stride: usize },
    Attention { reduction: usize },
    Norm,
    MaxPool,
    AvgPool,
    Fc,
    Consensus,
}

/// One layer of the plan, per clip (batch 1).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    /// output `(T, H, W)`
    pub out: (usize, usize, usize),
    /// live trainable scalars
    pub params: usize,
    /// saved non-trainable scalars (normalization statistics)
    pub buffers: usize,
    pub macs: u64,
    /// elementwise / pooling operations, outside the MAC count
    pub other_ops: u64,
}

/// Layer-by-layer description of a configuration plus the named shape chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub layers: Vec<LayerDesc>,
    /// `(name, [C, T, H, W])` after Conv1, Pool1, each stage, Pool5; then
    /// `FC` as `[T, K]` and `Consensus` as `[1, K]`.
    pub trace: Vec<(String, Vec<usize>)>,
}

fn pool_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

fn conv_desc(name: String, c_in: usize, c_out: usize, spec: ConvSpec, inp: (usize, usize, usize)) -> Result<LayerDesc> {
    let out = spec.output_dims(inp.0, inp.1, inp.2)?;
    Ok(LayerDesc {
        name,
        kind: LayerKind::Conv { kernel: (spec.kernel_t, spec.kernel_h, spec.kernel_w), stride: spec.stride_h },
        c_in,
        c_out,
        out,
        params: c_out * c_in * spec.kernel_t * spec.kernel_h * spec.kernel_w,
        buffers: 0,
        macs: spec.macs(c_in, c_out, out),
        other_ops: 0,
    })
}

fn norm_desc(name: String, c: usize, out: (usize, usize, usize), relu: bool) -> LayerDesc {
    let elems = (c * out.0 * out.1 * out.2) as u64;
    LayerDesc {
        name,
        kind: LayerKind::Norm,
        c_in: c,
        c_out: c,
        out,
        params: 2 * c,
        buffers: 2 * c,
        macs: 0,
        other_ops: elems * if relu { 3 } else { 2 },
    }
}

pub(crate) fn block_specs(cfg: &NetworkConfig) -> Vec<(usize, usize, usize, usize, usize)> {
    // (stage, block, c_in, width, stride)
    let mut v = Vec::new();
    let mut c_in = cfg.stem_channels();
    for (s, &nb) in cfg.blocks.iter().enumerate() {
        let w = cfg.stage_width(s);
        for b in 0..nb {
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            v.push((s, b, c_in, w, stride));
            c_in = w * EXPANSION;
        }
    }
    v
}

fn sth_spec(cfg: &NetworkConfig, index: usize, stride: usize) -> ConvSpec {
    ConvSpec::same(3, 3, 3)
        .with_stride(stride)
        .with_temporal_dilation(dilation_schedule(index, cfg.kernel_type))
}

fn stem_spec() -> ConvSpec {
    ConvSpec::same(1, 7, 7).with_stride(2)
}

/// Analytical layer plan; no parameters are allocated.
pub fn plan(cfg: &NetworkConfig) -> Result<Plan> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut trace = Vec::new();
    let t = cfg.frames;
    let stem = conv_desc("conv1".into(), cfg.in_channels, cfg.stem_channels(), stem_spec(), (t, cfg.input_hw, cfg.input_hw))?;
    let mut dims = stem.out;
    let c = cfg.stem_channels();
    layers.push(stem);
    layers.push(norm_desc("conv1.bn".into(), c, dims, true));
    trace.push(("Conv1".to_string(), vec![c, dims.0, dims.1, dims.2]));
    let pooled = (dims.0, pool_out(dims.1), pool_out(dims.2));
    layers.push(LayerDesc {
        name: "pool1".into(),
        kind: LayerKind::MaxPool,
        c_in: c,
        c_out: c,
        out: pooled,
        params: 0,
        buffers: 0,
        macs: 0,
        other_ops: (c * pooled.0 * pooled.1 * pooled.2 * 9) as u64,
    });
    dims = pooled;
    trace.push(("Pool1".to_string(), vec![c, dims.0, dims.1, dims.2]));

    let specs = block_specs(cfg);
    let mut c_cur = c;
    for (index, &(s, b, c_in, w, stride)) in specs.iter().enumerate() {
        let name = format!("conv{}_{}", s + 2, b + 1);
        let c1 = conv_desc(format!("{name}.conv1"), c_in, w, ConvSpec::same(1, 1, 1), dims)?;
        layers.push(c1);
        layers.push(norm_desc(format!("{name}.bn1"), w, dims, true));
        let spec = sth_spec(cfg, index, stride);
        let layout = build_layout_with(w, w, cfg.p, cfg.variant, false)?;
        let out = spec.output_dims(dims.0, dims.1, dims.2)?;
        let live = w * layout.live_per_output(3, 3, 3);
        let plane = (out.0 * out.1 * out.2) as u64;
        layers.push(LayerDesc {
            name: format!("{name}.sth"),
            kind: LayerKind::Hybrid { p: cfg.p, variant: cfg.variant, dilation: spec.dilation_t, stride },
            c_in: w,
            c_out: w,
            out,
            params: live,
            buffers: 0,
            macs: live as u64 * plane,
            other_ops: w as u64 * plane,
        });
        if cfg.attention {
            let r = cfg.attention_reduction;
            let hid = w / r;
            layers.push(LayerDesc {
                name: format!("{name}.attn"),
                kind: LayerKind::Attention { reduction: r },
                c_in: w,
                c_out: w,
                out,
                params: w * hid + hid + 2 * (hid * w + w),
                buffers: 0,
                macs: (3 * w * hid) as u64,
                // squeeze adds, softmax, weighted fusion
                other_ops: w as u64 * plane * 4 + 4 * w as u64,
            });
        }
        layers.push(norm_desc(format!("{name}.bn2"), w, out, true));
        let c3 = conv_desc(format!("{name}.conv3"), w, w * EXPANSION, ConvSpec::same(1, 1, 1), out)?;
        layers.push(c3);
        layers.push(norm_desc(format!("{name}.bn3"), w * EXPANSION, out, false));
        if b == 0 {
            let sc = conv_desc(format!("{name}.shortcut"), c_in, w * EXPANSION, ConvSpec::same(1, 1, 1).with_stride(stride), dims)?;
            layers.push(sc);
            layers.push(norm_desc(format!("{name}.shortcut_bn"), w * EXPANSION, out, false));
        }
        // residual add + relu
        if let Some(last) = layers.last_mut() {
            last.other_ops += 2 * (w * EXPANSION) as u64 * (out.0 * out.1 * out.2) as u64;
        }
        dims = out;
        c_cur = w * EXPANSION;
        let last_of_stage = index + 1 == specs.len() || specs[index + 1].0 != s;
        if last_of_stage {
            trace.push((format!("Conv{}_x", s + 2), vec![c_cur, dims.0, dims.1, dims.2]));
        }
    }
    let feat = c_cur;
    layers.push(LayerDesc {
        name: "pool5".into(),
        kind: LayerKind::AvgPool,
        c_in: feat,
        c_out: feat,
        out: (dims.0, 1, 1),
        params: 0,
        buffers: 0,
        macs: 0,
        other_ops: (feat * dims.0 * dims.1 * dims.2) as u64,
    });
    trace.push(("Pool5".to_string(), vec![feat, dims.0, 1, 1]));
    let k = cfg.num_class;
    layers.push(LayerDesc {
        name: "fc".into(),
        kind: LayerKind::Fc,
        c_in: feat,
        c_out: k,
        out: (dims.0, 1, 1),
        params: feat * k + k,
        buffers: 0,
        macs: (feat * k * dims.0) as u64,
        other_ops: (k * dims.0) as u64,
    });
    trace.push(("FC".to_string(), vec![dims.0, k]));
    layers.push(LayerDesc {
        name: "consensus".into(),
        kind: LayerKind::Consensus,
        c_in: k,
        c_out: k,
        out: (1, 1, 1),
        params: 0,
        buffers: 0,
        macs: 0,
        other_ops: (k * dims.0) as u64,
    });
    trace.push(("Consensus".to_string(), vec![1, k]));
    Ok(Plan { layers, trace })
}

// ---------------------------------------------------------------------------
// Layers with state.

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Param,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvCache {
    geom: Geom,
}

impl ConvLayer {
    fn new(name: &str, c_in: usize, c_out: usize, spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let dims = [c_out, c_in, spec.kernel_t, spec.kernel_h, spec.kernel_w];
        let mut weight = Param::new(format!("{name}.weight"), ParamKind::ConvWeight, Tensor::zeros(&dims)?);
        let fan_in = c_in * spec.kernel_t * spec.kernel_h * spec.kernel_w;
        weight.init_uniform(rng, (6.0 / fan_in as f64).sqrt());
        Ok(ConvLayer { weight, spec, c_in, c_out })
    }

    fn forward(&self, x: &[f64], n: usize, d: (usize, usize, usize)) -> Result<(Vec<f64>, (usize, usize, usize), ConvCache)> {
        let geom = Geom::new(self.spec, self.c_in, n, d.0, d.1, d.2)?;
        let y = conv_forward(x, &geom, self.weight.value.data(), self.c_out);
        Ok((y, (geom.to, geom.ho, geom.wo), ConvCache { geom }))
    }

    /// `x` is the input of the matching forward call.
    fn backward(&mut self, cache: &ConvCache, x: &[f64], gy: &[f64], need_gx: bool) -> Option<Vec<f64>> {
        let (gx, gw) = conv_backward(x, &cache.geom, self.weight.value.data(), self.c_out, gy, need_gx);
        self.weight.accumulate(&gw);
        gx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub name: String,
    pub conv1: ConvLayer,
    pub bn1: BatchNorm,
    pub sth: SthLayer,
    pub bn2: BatchNorm,
    pub conv3: ConvLayer,
    pub bn3: BatchNorm,
    pub shortcut: Option<(ConvLayer, BatchNorm)>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    /// block input
    x: Vec<f64>,
    c1: ConvCache,
    n1: NormCache,
    a1: Vec<f64>,
    branch: BranchCache,
    /// branch outputs, kept only for attention
    attn: Option<(AttnCache, Vec<f64>, Vec<f64>)>,
    n2: NormCache,
    a2: Vec<f64>,
    c3: ConvCache,
    n3: NormCache,
    sc: Option<(ConvCache, NormCache)>,
}

impl Bottleneck {
    fn forward(&self, x: Vec<f64>, n: usize, d: (usize, usize, usize), train: bool) -> Result<(Vec<f64>, (usize, usize, usize), BlockCache)> {
        let (h1, _, c1) = self.conv1.forward(&x, n, d)?;
        let (a1, n1) = self.bn1.forward(h1, train, true);
        let (mut os, ot, branch) = self.sth.branches_cm(&a1, n, d.0, d.1, d.2)?;
        let g = self.sth.geoms(n, d.0, d.1, d.2)?.0;
        let od = (g.to, g.ho, g.wo);
        let plane = od.0 * od.1 * od.2;
        let (fused, attn) = match &self.sth.attn {
            Some(a) => {
                let (f, c) = attn_forward_cm(a, &os, &ot, n, plane);
                (f, Some((c, os, ot)))
            }
            None => {
                for (a, b) in os.iter_mut().zip(&ot) {
                    *a += b;
                }
                (os, None)
            }
        };
        let (a2, n2) = self.bn2.forward(fused, train, true);
        let (h3, _, c3) = self.conv3.forward(&a2, n, od)?;
        let (mut out, n3) = self.bn3.forward(h3, train, false);
        let sc = match &self.shortcut {
            Some((conv, bn)) => {
                let (hs, _, cs) = conv.forward(&x, n, d)?;
                let (ys, ns) = bn.forward(hs, train, false);
                for (o, s) in out.iter_mut().zip(&ys) {
                    *o += s;
                }
                Some((cs, ns))
            }
            None => {
                for (o, s) in out.iter_mut().zip(&x) {
                    *o += s;
                }
                None
            }
        };
        relu_inplace(&mut out);
        let cache = BlockCache { x, c1, n1, a1, branch, attn, n2, a2, c3, n3, sc };
        Ok((out, od, cache))
    }

    /// `out` is the block output from the matching forward call.
    fn backward(&mut self, cache: &BlockCache, out: &[f64], mut g: Vec<f64>) -> Vec<f64> {
        relu_backward(out, &mut g);
        let g3 = self.bn3.backward(&cache.n3, &g);
        let mut ga2 = self.conv3.backward(&cache.c3, &cache.a2, &g3, true).expect("requested");
        drop(g3);
        relu_backward(&cache.a2, &mut ga2);
        let gf = self.bn2.backward(&cache.n2, &ga2);
        drop(ga2);
        let mut ga1 = match (&mut self.sth.attn, &cache.attn) {
            (Some(a), Some((c, os, ot))) => {
                let (g_os, g_ot) = attn_backward_cm(a, os, ot, c, &gf);
                self.sth.branches_backward_cm(&cache.branch, &cache.a1, &g_os, &g_ot, true)
            }
            _ => self.sth.branches_backward_cm(&cache.branch, &cache.a1, &gf, &gf, true),
        }
        .expect("requested");
        relu_backward(&cache.a1, &mut ga1);
        let g1 = self.bn1.backward(&cache.n1, &ga1);
        let mut gx = self.conv1.backward(&cache.c1, &cache.x, &g1, true).expect("requested");
        match (&mut self.shortcut, &cache.sc) {
            (Some((conv, bn)), Some((cc, nc))) => {
                let gs = bn.backward(nc, &g);
                let gxs = conv.backward(cc, &cache.x, &gs, true).expect("requested");
                for (a, b) in gx.iter_mut().zip(&gxs) {
                    *a += b;
                }
            }
            _ => {
                for (a, b) in gx.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        gx
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = vec![&mut self.bn1, &mut self.bn2, &mut self.bn3];
        if let Some((_, bn)) = &mut self.shortcut {
            v.push(bn);
        }
        v
    }

    fn norm_caches(c: &BlockCache) -> Vec<&NormCache> {
        let mut v = vec![&c.n1, &c.n2, &c.n3];
        if let Some((_, n)) = &c.sc {
            v.push(n);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub stem: ConvLayer,
    pub stem_bn: BatchNorm,
    pub stages: Vec<Vec<Bottleneck>>,
    /// `(C_feat, num_class)`
    pub fc_w: Param,
    pub fc_b: Param,
}

/// Forward state of [`Network`] for one batch.
#[derive(Debug, Clone)]
pub struct NetCache {
    n: usize,
    input_dims: (usize, usize, usize),
    stem_in: Vec<f64>,
    stem: ConvCache,
    stem_norm: NormCache,
    stem_out: Vec<f64>,
    stem_dims: (usize, usize, usize),
    pool_idx: Vec<usize>,
    blocks: Vec<BlockCache>,
    final_dims: (usize, usize, usize),
    /// output of the last block
    last: Vec<f64>,
    feat: Vec<f64>,
    /// per-sample `(name, [C, T, H, W])` / `[T, K]` shapes as executed
    pub trace: Vec<(String, Vec<usize>)>,
}

impl NetCache {
    /// `(layer index, α_S, α_T)` per hybrid layer with attention, each `(N, C_o)`.
    pub fn alphas(&self) -> Vec<(usize, Tensor, Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                b.attn.as_ref().map(|(a, _, _)| {
                    let co = a.alpha_t.len() / self.n;
                    (
                        i,
                        Tensor::from_vec(&[self.n, co], a.alpha_s.clone()).expect("alpha shape"),
                        Tensor::from_vec(&[self.n, co], a.alpha_t.clone()).expect("alpha shape"),
                    )
                })
            })
            .collect()
    }
}

/// Build and randomly initialize a network. Same `(cfg, seed)` → identical
/// parameters.
pub fn build_sth_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let stem = ConvLayer::new("conv1", cfg.in_channels, cfg.stem_channels(), stem_spec(), &mut rng)?;
    let stem_bn = BatchNorm::new("conv1.bn", cfg.stem_channels());
    let mut stages: Vec<Vec<Bottleneck>> = vec![Vec::new(); cfg.blocks.len()];
    for (index, (s, b, c_in, w, stride)) in block_specs(cfg).into_iter().enumerate() {
        let name = format!("conv{}_{}", s + 2, b + 1);
        let conv1 = ConvLayer::new(&format!("{name}.conv1"), c_in, w, ConvSpec::same(1, 1, 1), &mut rng)?;
        let layout = build_layout_with(w, w, cfg.p, cfg.variant, false)?;
        let mut sth = SthLayer::new(&format!("{name}.sth"), layout, sth_spec(cfg, index, stride))?;
        sth.init(&mut rng);
        if cfg.attention {
            sth = sth.with_attention(cfg.attention_reduction, &mut rng)?;
        }
        let conv3 = ConvLayer::new(&format!("{name}.conv3"), w, w * EXPANSION, ConvSpec::same(1, 1, 1), &mut rng)?;
        let shortcut = if b == 0 {
            let conv = ConvLayer::new(
                &format!("{name}.shortcut"),
                c_in,
                w * EXPANSION,
                ConvSpec::same(1, 1, 1).with_stride(stride),
                &mut rng,
            )?;
            Some((conv, BatchNorm::new(&format!("{name}.shortcut_bn"), w * EXPANSION)))
        } else {
            None
        };
        stages[s].push(Bottleneck {
            bn1: BatchNorm::new(&format!("{name}.bn1"), w),
            bn2: BatchNorm::new(&format!("{name}.bn2"), w),
            bn3: BatchNorm::new(&format!("{name}.bn3"), w * EXPANSION),
            name,
            conv1,
            sth,
            conv3,
            shortcut,
        });
    }
    let feat = cfg.feature_channels();
    let mut fc_w = Param::new("fc.weight", ParamKind::FcWeight, Tensor::zeros(&[feat, cfg.num_class])?);
    fc_w.init_uniform(&mut rng, 1.0 / (feat as f64).sqrt());
    let fc_b = Param::new("fc.bias", ParamKind::Bias, Tensor::zeros(&[cfg.num_class])?);
    Ok(Network { cfg: cfg.clone(), stem, stem_bn, stages, fc_w, fc_b })
}

fn maxpool_forward(x: &[f64], c: usize, n: usize, d: (usize, usize, usize)) -> (Vec<f64>, Vec<usize>, (usize, usize, usize)) {
    let (t, h, w) = d;
    let (ho, wo) = (pool_out(h), pool_out(w));
    let mut out = Vec::with_capacity(c * n * t * ho * wo);
    let mut idx = Vec::with_capacity(out.capacity());
    for plane in 0..c * n * t {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for i in 0..3 {
                    let hs = (oh * 2 + i) as isize - 1;
                    if hs < 0 || hs as usize >= h {
                        continue;
                    }
                    for j in 0..3 {
                        let ws = (ow * 2 + j) as isize - 1;
                        if ws < 0 || ws as usize >= w {
                            continue;
                        }
                        let q = base + hs as usize * w + ws as usize;
                        if x[q] > best {
                            best = x[q];
                            arg = q;
                        }
                    }
                }
                out.push(best);
                idx.push(arg);
            }
        }
    }
    (out, idx, (t, ho, wo))
}

impl Network {
    pub fn blocks(&self) -> impl Iterator<Item = &Bottleneck> {
        self.stages.iter().flatten()
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Bottleneck> {
        self.stages.iter_mut().flatten()
    }

    /// Every trainable parameter in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.stem.weight, &self.stem_bn.gamma, &self.stem_bn.beta];
        for b in self.blocks() {
            v.extend([&b.conv1.weight, &b.bn1.gamma, &b.bn1.beta]);
            v.extend(b.sth.params());
            v.extend([&b.bn2.gamma, &b.bn2.beta, &b.conv3.weight, &b.bn3.gamma, &b.bn3.beta]);
            if let Some((c, n)) = &b.shortcut {
                v.extend([&c.weight, &n.gamma, &n.beta]);
            }
        }
        v.extend([&self.fc_w, &self.fc_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.stem.weight, &mut self.stem_bn.gamma, &mut self.stem_bn.beta];
        for b in self.stages.iter_mut().flatten() {
            v.extend([&mut b.conv1.weight, &mut b.bn1.gamma, &mut b.bn1.beta]);
            v.extend(b.sth.params_mut());
            v.extend([&mut b.bn2.gamma, &mut b.bn2.beta, &mut b.conv3.weight, &mut b.bn3.gamma, &mut b.bn3.beta]);
            if let Some((c, n)) = &mut b.shortcut {
                v.extend([&mut c.weight, &mut n.gamma, &mut n.beta]);
            }
        }
        v.extend([&mut self.fc_w, &mut self.fc_b]);
        v
    }

    fn norms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.stem_bn];
        for b in self.blocks() {
            v.extend([&b.bn1, &b.bn2, &b.bn3]);
            if let Some((_, n)) = &b.shortcut {
                v.push(n);
            }
        }
        v
    }

    /// Normalization statistics in a fixed order.
    pub fn buffers(&self) -> Vec<&Buffer> {
        self.norms().into_iter().flat_map(|n| [&n.running_mean, &n.running_var]).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut v = vec![&mut self.stem_bn.running_mean, &mut self.stem_bn.running_var];
        for b in self.stages.iter_mut().flatten() {
            for n in b.norms_mut() {
                v.extend([&mut n.running_mean, &mut n.running_var]);
            }
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn hybrid_layers(&self) -> impl Iterator<Item = &SthLayer> {
        self.blocks().map(|b| &b.sth)
    }

    /// Zero every temporal kernel (turns the network into a frame-wise model).
    pub fn zero_temporal_kernels(&mut self) {
        for b in self.blocks_mut() {
            b.sth.w_temporal.value.data_mut().fill(0.0);
        }
    }

    /// Per-frame logits `(N, T, K)` for a clip `(N, C, T, H, W)`.
    ///
    /// `train` selects batch statistics in the normalization layers.
    pub fn forward(&self, clip: &Tensor, train: bool) -> Result<(Tensor, NetCache)> {
        let d = clip.dims();
        let cfg = &self.cfg;
        if d.len() != 5 || d[1] != cfg.in_channels || d[2] != cfg.frames || d[3] != cfg.input_hw || d[4] != cfg.input_hw {
            return Err(Error::ShapeMismatch(format!(
                "clip {:?}, network expects (N, {}, {}, {}, {})",
                d, cfg.in_channels, cfg.frames, cfg.input_hw, cfg.input_hw
            )));
        }
        let n = d[0];
        let input_dims = (d[2], d[3], d[4]);
        let x0 = swap_leading(clip.data(), n, d[1], d[2] * d[3] * d[4]);
        let mut trace = Vec::new();
        let (h, sd, stem) = self.stem.forward(&x0, n, input_dims)?;
        let (a, stem_norm) = self.stem_bn.forward(h, train, true);
        let c0 = self.stem.c_out;
        trace.push(("Conv1".to_string(), vec![c0, sd.0, sd.1, sd.2]));
        let (mut x, pool_idx, mut dims) = maxpool_forward(&a, c0, n, sd);
        trace.push(("Pool1".to_string(), vec![c0, dims.0, dims.1, dims.2]));
        let mut blocks = Vec::new();
        let mut c = c0;
        for (s, stage) in self.stages.iter().enumerate() {
            for b in stage {
                let (y, od, cache) = b.forward(x, n, dims, train)?;
                x = y;
                dims = od;
                c = b.conv3.c_out;
                blocks.push(cache);
            }
            trace.push((format!("Conv{}_x", s + 2), vec![c, dims.0, dims.1, dims.2]));
        }
        // spatial average pool: (C, N, T, H, W) -> (C, N·T)
        let hw = dims.1 * dims.2;
        let nt = n * dims.0;
        let feat: Vec<f64> = x.chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        trace.push(("Pool5".to_string(), vec![c, dims.0, 1, 1]));
        let k = cfg.num_class;
        let mut logits = vec![0.0; nt * k];
        for row in logits.chunks_exact_mut(k) {
            row.copy_from_slice(self.fc_b.value.data());
        }
        crate::gemm::gemm(
            1.0,
            crate::gemm::View::row_major(&feat, c, nt).t(),
            crate::gemm::View::row_major(self.fc_w.value.data(), c, k),
            1.0,
            &mut logits,
            k,
        );
        trace.push(("FC".to_string(), vec![dims.0, k]));
        trace.push(("Consensus".to_string(), vec![1, k]));
        let logits = Tensor::from_vec(&[n, dims.0, k], logits)?;
        let cache = NetCache {
            n,
            input_dims,
            stem_in: x0,
            stem,
            stem_norm,
            stem_out: a,
            stem_dims: sd,
            pool_idx,
            blocks,
            final_dims: dims,
            last: x,
            feat,
            trace,
        };
        Ok((logits, cache))
    }

    /// Accumulate parameter gradients for upstream `g_logits` `(N, T, K)`.
    pub fn backward(&mut self, cache: &NetCache, g_logits: &Tensor) -> Result<()> {
        let n = cache.n;
        let dims = cache.final_dims;
        let k = self.cfg.num_class;
        let nt = n * dims.0;
        if g_logits.dims() != [n, dims.0, k] {
            return Err(Error::ShapeMismatch(format!("grad {:?} vs logits {:?}", g_logits.dims(), [n, dims.0, k])));
        }
        let c = self.fc_w.value.dims()[0];
        let g = g_logits.data();
        let mut gw = vec![0.0; c * k];
        crate::gemm::gemm(
            1.0,
            crate::gemm::View::row_major(&cache.feat, c, nt),
            crate::gemm::View::row_major(g, nt, k),
            0.0,
            &mut gw,
            k,
        );
        let mut gb = vec![0.0; k];
        for row in g.chunks_exact(k) {
            for (a, b) in gb.iter_mut().zip(row) {
                *a += b;
            }
        }
        let mut gfeat = vec![0.0; c * nt];
        crate::gemm::gemm(
            1.0,
            crate::gemm::View::row_major(self.fc_w.value.data(), c, k),
            crate::gemm::View::row_major(g, nt, k).t(),
            0.0,
            &mut gfeat,
            nt,
        );
        self.fc_w.accumulate(&gw);
        self.fc_b.accumulate(&gb);
        let hw = dims.1 * dims.2;
        let mut gx: Vec<f64> = gfeat.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
        let blocks: Vec<&mut Bottleneck> = self.stages.iter_mut().flatten().collect();
        for (i, b) in blocks.into_iter().enumerate().rev() {
            let out = cache.blocks.get(i + 1).map_or(&cache.last, |c| &c.x);
            gx = b.backward(&cache.blocks[i], out, gx);
        }
        // max pool
        let mut ga = vec![0.0; cache.stem_out.len()];
        for (&i, &gv) in cache.pool_idx.iter().zip(&gx) {
            ga[i] += gv;
        }
        relu_backward(&cache.stem_out, &mut ga);
        let gh = self.stem_bn.backward(&cache.stem_norm, &ga);
        self.stem.backward(&cache.stem, &cache.stem_in, &gh, false);
        let _ = (cache.input_dims, cache.stem_dims);
        Ok(())
    }

    /// Fold the batch statistics of a training forward into the running ones.
    pub fn update_running_stats(&mut self, cache: &NetCache) {
        self.stem_bn.update_running(&cache.stem_norm);
        let mut caches = cache.blocks.iter();
        for b in self.stages.iter_mut().flatten() {
            let bc = caches.next().expect("one cache per block");
            for (bn, nc) in b.norms_mut().into_iter().zip(Bottleneck::norm_caches(bc)) {
                bn.update_running(nc);
            }
        }
    }

    /// Per-frame logits in evaluation mode.
    pub fn predict(&self, clip: &Tensor) -> Result<Tensor> {
        self.forward(clip, false).map(|(l, _)| l)
    }
}

/// Per-frame logits `(N, T, K)` (evaluation mode).
pub fn network_forward(net: &Network, clip: &Tensor) -> Result<Tensor> {
    net.predict(clip)
}

/// Average of per-frame logits: `(N, T, K) → (N, K)`.
pub fn consensus(frame_logits: &Tensor) -> Result<Tensor> {
    if frame_logits.dims().len() != 3 {
        return Err(Error::ShapeMismatch(format!("frame logits must be rank 3, got {:?}", frame_logits.dims())));
    }
    frame_logits.reduce_mean(&[1])
}

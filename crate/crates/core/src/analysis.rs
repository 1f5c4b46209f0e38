//! Parameter and multiply-accumulate accounting, and attention statistics.
//!
//! Headline GFLOPs are MACs / 1e9: one multiply-add counts once. Pooling,
//! normalization, activation and softmax costs go in a separate
//! elementwise column and stay out of the headline.

use crate::data::{Dataset, TsnMode};
use crate::error::{Error, Result};
use crate::layout::Proportion;
use crate::network::{plan, LayerKind, Network, NetworkConfig};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    /// live trainable scalars plus normalization statistics
    pub params: usize,
    pub macs: u64,
    pub other_ops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub cfg: NetworkConfig,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_other(&self) -> u64 {
        self.rows.iter().map(|r| r.other_ops).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_macs() as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params() as f64 / 1e6
    }

    fn header(&self) -> String {
        let c = &self.cfg;
        format!(
            "# p = {}, kernel_type = {}, attention = {}, variant = {}, input = {}x{}x{}x{}, classes = {}, scale = {}\n\
             # GFLOPs = MACs / 1e9 (one multiply-add counted once); elementwise ops excluded from the headline\n",
            c.p,
            c.kernel_type,
            if c.attention { "on" } else { "off" },
            c.variant,
            c.in_channels,
            c.frames,
            c.input_hw,
            c.input_hw,
            c.num_class,
            c.scale_factor
        )
    }

    /// Aligned table with totals.
    pub fn to_text(&self) -> String {
        let mut s = self.header();
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<w$} {:>12} {:>14} {:>12}", "layer", "params", "macs", "elementwise");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$} {:>12} {:>14} {:>12}", r.name, r.params, r.macs, r.other_ops);
        }
        let _ = writeln!(s, "{:<w$} {:>12} {:>14} {:>12}", "total", self.total_params(), self.total_macs(), self.total_other());
        let _ = writeln!(s, "params: {:.3} M", self.mparams());
        let _ = writeln!(s, "GFLOPs: {:.3}", self.gflops());
        s
    }

    /// `layer,params,macs`, one line per layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.params, r.macs);
        }
        s
    }
}

/// Report straight from a configuration.
pub fn cost_report(cfg: &NetworkConfig) -> Result<CostReport> {
    let plan = plan(cfg)?;
    let rows = plan
        .layers
        .into_iter()
        .map(|l| CostRow { name: l.name, params: l.params + l.buffers, macs: l.macs, other_ops: l.other_ops })
        .collect();
    Ok(CostReport { cfg: cfg.clone(), rows })
}

pub fn count_params(net: &Network) -> CostReport {
    cost_report(&net.cfg).expect("a built network has a valid config")
}

/// Costs for one clip of shape `(C, T, H, W)`.
pub fn count_flops(net: &Network, input: &[usize]) -> Result<CostReport> {
    let &[c, t, h, w] = input else {
        return Err(Error::ShapeMismatch(format!("clip shape must be (C, T, H, W), got {input:?}")));
    };
    if c != net.cfg.in_channels || h != w {
        return Err(Error::ShapeMismatch(format!(
            "clip {input:?} for a network taking {} channels of square frames",
            net.cfg.in_channels
        )));
    }
    let cfg = NetworkConfig { frames: t, input_hw: h, ..net.cfg.clone() };
    cost_report(&cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: Proportion,
    pub params: usize,
    pub macs: u64,
}

/// Totals over a list of proportions, other settings fixed.
pub fn sweep_p(cfg: &NetworkConfig, ps: &[Proportion]) -> Result<Vec<SweepRow>> {
    ps.iter()
        .map(|&p| {
            let r = cost_report(&NetworkConfig { p, ..cfg.clone() })?;
            Ok(SweepRow { p, params: r.total_params(), macs: r.total_macs() })
        })
        .collect()
}

pub fn sweep_text(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>6} {:>12} {:>10} {:>14} {:>9}\n", "p", "params", "M", "macs", "GFLOPs");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>12} {:>10.3} {:>14} {:>9.3}",
            r.p.to_string(),
            r.params,
            r.params as f64 / 1e6,
            r.macs,
            r.macs as f64 / 1e9
        );
    }
    s
}

/// Whole-network totals with every hybrid core swapped for another core.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreRow {
    pub core: &'static str,
    pub params: usize,
    pub macs: u64,
}

/// Totals for a plain 2D core, (2+1)D sequential and parallel cores, and
/// the merge, hybrid and hybrid-with-attention variants at `cfg.p`.
pub fn core_comparison(cfg: &NetworkConfig) -> Result<Vec<CoreRow>> {
    use crate::layout::Variant;
    let total = |c: &NetworkConfig| -> Result<(usize, u64)> {
        let r = cost_report(c)?;
        Ok((r.total_params(), r.total_macs()))
    };
    let flat = NetworkConfig { p: Proportion::ZERO, attention: false, ..cfg.clone() };
    let (p2d, m2d) = total(&flat)?;
    // temporal K_T×1×1 kernels on top of the 2D core: C_o·C·K_T each, where
    // the sequential form reads C_o channels and the parallel one C_i
    let kt = 3;
    let (mut seq, mut par) = ((0usize, 0u64), (0usize, 0u64));
    for l in plan(&flat)?.layers {
        if let LayerKind::Hybrid { .. } = l.kind {
            let plane = (l.out.0 * l.out.1 * l.out.2) as u64;
            let s = l.c_out * l.c_out * kt;
            let p = l.c_out * l.c_in * kt;
            seq = (seq.0 + s, seq.1 + s as u64 * plane);
            par = (par.0 + p, par.1 + p as u64 * plane);
        }
    }
    let mut rows = vec![
        CoreRow { core: "2d", params: p2d, macs: m2d },
        CoreRow { core: "(2+1)d-sequential", params: p2d + seq.0, macs: m2d + seq.1 },
        CoreRow { core: "(2+1)d-parallel", params: p2d + par.0, macs: m2d + par.1 },
    ];
    for (core, variant, attention) in
        [("merge", Variant::Merge, false), ("hybrid", Variant::Hybrid, false), ("hybrid+attention", Variant::Hybrid, true)]
    {
        let (params, macs) = total(&NetworkConfig { variant, attention, ..cfg.clone() })?;
        rows.push(CoreRow { core, params, macs });
    }
    Ok(rows)
}

pub fn core_text(rows: &[CoreRow]) -> String {
    let mut s = format!("{:<18} {:>12} {:>9}\n", "core", "params(M)", "GFLOPs");
    for r in rows {
        let _ = writeln!(s, "{:<18} {:>12.3} {:>9.3}", r.core, r.params as f64 / 1e6, r.macs as f64 / 1e9);
    }
    s
}

/// Attention coefficients averaged over channels, per sample and layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSample {
    pub sample: usize,
    pub layer: usize,
    pub alpha_s: f64,
    pub alpha_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStat {
    pub layer: usize,
    pub name: String,
    pub alpha_s: f64,
    pub alpha_t: f64,
}

/// Per-sample, per-layer channel means of `(α_S, α_T)` over `data` with
/// centre sampling. Errors when the network has no attention.
pub fn attention_samples(net: &Network, data: &Dataset, segments: usize) -> Result<Vec<AttentionSample>> {
    if !net.cfg.attention {
        return Err(Error::Unsupported("attention statistics need a network with attention".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::new();
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(16) {
        let clip = data.batch(chunk, segments, TsnMode::Test, 0)?;
        let (_, cache) = net.forward(&clip, false)?;
        for (layer, a_s, a_t) in cache.alphas() {
            let co = a_s.dims()[1];
            for (j, &sample) in chunk.iter().enumerate() {
                let s = &a_s.data()[j * co..(j + 1) * co];
                let t = &a_t.data()[j * co..(j + 1) * co];
                out.push(AttentionSample {
                    sample,
                    layer,
                    alpha_s: s.iter().sum::<f64>() / co as f64,
                    alpha_t: t.iter().sum::<f64>() / co as f64,
                });
            }
        }
    }
    out.sort_by_key(|r| (r.sample, r.layer));
    Ok(out)
}

/// Per-layer means over all channels and samples.
pub fn export_attention_stats(net: &Network, data: &Dataset, segments: usize) -> Result<Vec<AttentionStat>> {
    let samples = attention_samples(net, data, segments)?;
    Ok(net
        .hybrid_layers()
        .enumerate()
        .map(|(layer, l)| {
            let rows: Vec<&AttentionSample> = samples.iter().filter(|r| r.layer == layer).collect();
            let n = rows.len() as f64;
            AttentionStat {
                layer,
                name: l.w_spatial.name.trim_end_matches(".w_spatial").to_string(),
                alpha_s: rows.iter().map(|r| r.alpha_s).sum::<f64>() / n,
                alpha_t: rows.iter().map(|r| r.alpha_t).sum::<f64>() / n,
            }
        })
        .collect())
}

/// `layer,alpha_s,alpha_t`
pub fn attention_csv(stats: &[AttentionStat]) -> String {
    let mut s = String::from("layer,alpha_s,alpha_t\n");
    for r in stats {
        let _ = writeln!(s, "{},{:.17},{:.17}", r.layer, r.alpha_s, r.alpha_t);
    }
    s
}

/// `sample,layer,alpha_s,alpha_t`
pub fn attention_samples_csv(rows: &[AttentionSample]) -> String {
    let mut s = String::from("sample,layer,alpha_s,alpha_t\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.17},{:.17}", r.sample, r.layer, r.alpha_s, r.alpha_t);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv3d_naive_counted, ConvSpec, Weights3D};
    use crate::data::SynthConfig;
    use crate::network::build_sth_network;
    use crate::tensor::Tensor;

    fn full(p: &str, attention: bool) -> CostReport {
        let mut cfg = NetworkConfig::full_size(174);
        cfg.p = p.parse().unwrap();
        cfg.attention = attention;
        cost_report(&cfg).unwrap()
    }

    #[test]
    fn full_size_counts() {
        // frozen from an independent layer-by-layer tally
        assert_eq!(full("0", false).total_params(), 23_917_678);
        assert_eq!(full("1/8", false).total_params(), 22_974_574);
        assert_eq!(full("1/4", false).total_params(), 22_031_470);
        assert_eq!(full("1/2", false).total_params(), 20_145_262);
        assert_eq!(full("1/4", true).total_params(), 22_031_470 + 951_600);
        for (p, g) in [("0", 32.700), ("1/8", 31.467), ("1/4", 30.234), ("1/2", 27.767)] {
            assert!((full(p, false).gflops() - g).abs() < 5e-4, "p = {p}");
        }
    }

    #[test]
    fn totals_are_column_sums_and_csv_matches() {
        let r = full("1/4", true);
        let csv = r.to_csv();
        let (mut params, mut macs) = (0usize, 0u64);
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            params += f[1].parse::<usize>().unwrap();
            macs += f[2].parse::<u64>().unwrap();
        }
        assert_eq!((params, macs), (r.total_params(), r.total_macs()));
        let text = r.to_text();
        assert!(text.contains("p = 1/4") && text.contains("attention = on") && text.contains("kernel_type = fixed"));
    }

    #[test]
    fn sweep_is_strictly_decreasing() {
        let ps: Vec<Proportion> = ["0", "1/8", "1/4", "1/2"].iter().map(|s| s.parse().unwrap()).collect();
        for cfg in [NetworkConfig::full_size(174), NetworkConfig::desk(8, 56, 8, 4)] {
            let rows = sweep_p(&cfg, &ps).unwrap();
            for w in rows.windows(2) {
                assert!(w[1].params < w[0].params && w[1].macs < w[0].macs);
            }
        }
    }

    #[test]
    fn single_conv_matches_loop_counter() {
        let spec = ConvSpec::same(1, 3, 3);
        let x = Tensor::random_uniform(&[1, 4, 2, 4, 4], 1, -1.0, 1.0).unwrap();
        let w = Weights3D::new(Tensor::random_uniform(&[4, 4, 1, 3, 3], 2, -1.0, 1.0).unwrap()).unwrap();
        let (_, counted) = conv3d_naive_counted(&x, &w, &spec).unwrap();
        assert_eq!(counted, 4608);
        assert_eq!(spec.macs(4, 4, (2, 4, 4)), counted);
    }

    #[test]
    fn hybrid_rows_match_counted_branch_loops() {
        // Each kernel-type block is a spatial conv over its spatial inputs plus
        // a temporal conv over its temporal inputs; run both through the
        // counting loop and compare with the report.
        let cfg = NetworkConfig { blocks: vec![1, 1, 1, 1], ..NetworkConfig::desk(16, 32, 4, 3) };
        let net = build_sth_network(&cfg, 1).unwrap();
        let layers = plan(&cfg).unwrap().layers;
        let report = count_params(&net);
        let mut checked = 0;
        for layer in net.hybrid_layers() {
            let name = layer.w_spatial.name.trim_end_matches(".w_spatial").trim_end_matches(".sth");
            let input = layers.iter().find(|l| l.name == format!("{name}.conv1")).unwrap().out;
            let row = report.rows.iter().find(|r| r.name == format!("{name}.sth")).unwrap();
            let mut counted = 0;
            for b in layer.layout.blocks() {
                let ci = layer.layout.c_in;
                for (chans, spec) in [(ci - b.temporal.len(), layer.spec.spatial_part()), (b.temporal.len(), layer.spec.temporal_part())] {
                    if chans == 0 || b.out.is_empty() {
                        continue;
                    }
                    let x = Tensor::zeros(&[1, chans, input.0, input.1, input.2]).unwrap();
                    let w = Tensor::zeros(&[b.out.len(), chans, spec.kernel_t, spec.kernel_h, spec.kernel_w]).unwrap();
                    counted += conv3d_naive_counted(&x, &Weights3D::new(w).unwrap(), &spec).unwrap().1;
                }
            }
            assert_eq!(row.macs, counted, "{name}");
            checked += 1;
        }
        assert_eq!(checked, 4);
        for r in report.rows.iter().filter(|r| r.name.ends_with("conv1") || r.name.ends_with("conv3")) {
            let l = layers.iter().find(|l| l.name == r.name).unwrap();
            let LayerKind::Conv { kernel, stride } = l.kind else { panic!("{}", r.name) };
            let spec = ConvSpec::same(kernel.0, kernel.1, kernel.2).with_stride(stride);
            let inp = if r.name == "conv1" { (4, 32, 32) } else { (l.out.0, l.out.1 * stride, l.out.2 * stride) };
            let x = Tensor::zeros(&[1, l.c_in, inp.0, inp.1, inp.2]).unwrap();
            let w = Tensor::zeros(&[l.c_out, l.c_in, kernel.0, kernel.1, kernel.2]).unwrap();
            let (_, counted) = conv3d_naive_counted(&x, &Weights3D::new(w).unwrap(), &spec).unwrap();
            assert_eq!(r.macs, counted, "{}", r.name);
        }
    }

    #[test]
    fn core_comparison_orders_costs() {
        let rows = core_comparison(&NetworkConfig::full_size(174)).unwrap();
        let get = |c: &str| rows.iter().find(|r| r.core == c).unwrap().clone();
        assert!(get("hybrid").params < get("2d").params);
        assert!(get("2d").params < get("(2+1)d-parallel").params);
        assert_eq!(get("hybrid").params, get("merge").params);
        assert_eq!(get("hybrid+attention").params, get("hybrid").params + 951_600);
    }

    #[test]
    fn attention_stats_need_attention_and_sum_to_one() {
        let data = Dataset::synth(&SynthConfig { resolution: 32, object_size: 6, frames_total: 8, ..SynthConfig::motion(2, 3) }).unwrap();
        let cfg = NetworkConfig::desk(16, 32, 8, 4);
        let plain = build_sth_network(&cfg, 0).unwrap();
        assert!(matches!(export_attention_stats(&plain, &data, 8), Err(Error::Unsupported(_))));
        let mut net = build_sth_network(&NetworkConfig { attention: true, ..cfg }, 0).unwrap();
        for rows in attention_samples(&net, &data, 8).unwrap().chunks(1) {
            assert!((rows[0].alpha_s + rows[0].alpha_t - 1.0).abs() < 1e-12);
        }
        for l in net.stages.iter_mut().flatten() {
            l.sth.attn.as_mut().unwrap().symmetrize();
        }
        let stats = export_attention_stats(&net, &data, 8).unwrap();
        assert_eq!(stats.len(), 16);
        for s in stats {
            assert!((s.alpha_s - 0.5).abs() < 1e-15 && (s.alpha_t - 0.5).abs() < 1e-15);
        }
    }
}

//! Self-checks behind `sth verify`: the hybrid operator against its masked
//! dense expansion, analytic gradients against central differences, and the
//! full-size shape chain.

use crate::conv::{conv3d_naive, ConvSpec};
use crate::data::{Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::layout::{build_layout_with, Proportion, Variant};
use crate::network::{build_sth_network, plan, Network, NetworkConfig};
use crate::param::Param;
use crate::rng::Rng;
use crate::sth::{attentive_integrate, expand_to_masked_3d, masked_3d_spec, sth_backward, sth_forward, sth_layer_forward, SthLayer};
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;

/// Which checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Oracle,
    Grad,
    Shapes,
    All,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Scope::Oracle),
            "grad" => Ok(Scope::Grad),
            "shapes" => Ok(Scope::Shapes),
            "all" => Ok(Scope::All),
            _ => Err(Error::InvalidArgument(format!("unknown verify scope {s:?} (oracle, grad, shapes, all)"))),
        }
    }
}

/// Outcome of one check. `observed` is the worst error seen (0 for exact
/// comparisons).
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: max err {:.3e} (tol {:.0e}) {}", self.name, self.observed, self.tolerance, self.detail)
    }
}

fn check(name: &str, observed: f64, tolerance: f64, detail: String) -> Check {
    Check { name: name.into(), passed: observed < tolerance, observed, tolerance, detail }
}

/// A random small hybrid-layer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCase {
    pub c_in: usize,
    pub c_out: usize,
    pub p: Proportion,
    pub variant: Variant,
    pub dilation: usize,
    pub stride: usize,
    pub kernel_t: usize,
    pub input: [usize; 5],
}

impl OracleCase {
    pub fn random(rng: &mut Rng) -> Self {
        let g = [0usize, 1, 2, 4, 8][rng.below(5)];
        let p = match g {
            0 => Proportion::ZERO,
            1 => Proportion::ONE,
            _ => Proportion::one_over(g).expect("g ≥ 2"),
        };
        let unit = g.max(1);
        let variant = if rng.below(2) == 0 { Variant::Hybrid } else { Variant::Merge };
        let c_in = unit * (1 + rng.below(3));
        let c_out = if variant == Variant::Hybrid { unit * (1 + rng.below(3)) } else { 1 + rng.below(9) };
        OracleCase {
            c_in,
            c_out,
            p,
            variant,
            dilation: 1 + rng.below(3),
            stride: 1 + rng.below(2),
            kernel_t: [1, 3, 5][rng.below(3)],
            input: [1 + rng.below(2), c_in, 2 + rng.below(5), 3 + rng.below(5), 3 + rng.below(5)],
        }
    }

    pub fn layer(&self, seed: u64) -> Result<SthLayer> {
        let layout = build_layout_with(self.c_in, self.c_out, self.p, self.variant, true)?;
        let spec = ConvSpec::same(self.kernel_t, 3, 3).with_stride(self.stride).with_temporal_dilation(self.dilation);
        let mut l = SthLayer::new("oracle", layout, spec)?;
        l.init(&mut Rng::new(seed));
        Ok(l)
    }
}

/// Max |os + ot − conv3d_naive(x, masked dense kernel)| for one layer.
pub fn oracle_gap(layer: &SthLayer, x: &Tensor) -> Result<f64> {
    let (os, ot) = sth_forward(x, layer)?;
    let dense = conv3d_naive(x, &expand_to_masked_3d(layer)?, &masked_3d_spec(layer))?;
    os.add(&ot)?.max_abs_diff(&dense)
}

/// `cases` random configurations through [`oracle_gap`].
pub fn oracle_suite(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut merge = 0;
    for i in 0..cases {
        let case = OracleCase::random(&mut rng);
        merge += (case.variant == Variant::Merge) as usize;
        let layer = case.layer(seed ^ (i as u64 + 1))?;
        let x = Tensor::random_uniform(&case.input, rng.next_u64(), -1.0, 1.0)?;
        worst = worst.max(oracle_gap(&layer, &x)?);
    }
    Ok(check("oracle", worst, 1e-10, format!("over {cases} random layers ({merge} merge)")))
}

/// Attention coefficients on random inputs, worst |α_S + α_T − 1|.
pub fn attention_sum_check(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let layout = build_layout_with(8, 8, Proportion::one_over(4)?, Variant::Hybrid, false)?;
        let mut l = SthLayer::new("attn", layout, ConvSpec::same(3, 3, 3))?.with_attention(4, &mut rng)?;
        l.init(&mut rng);
        let scale = rng.uniform(0.1, 20.0);
        let x = Tensor::random_uniform(&[2, 8, 3, 4, 4], rng.next_u64(), -scale, scale)?;
        let (os, ot) = sth_forward(&x, &l)?;
        let attn = l.attn.as_ref().expect("attention enabled");
        let (_, a_s, a_t) = attentive_integrate(&os, &ot, attn)?;
        for (s, t) in a_s.data().iter().zip(a_t.data()) {
            worst = worst.max((s + t - 1.0).abs());
        }
    }
    Ok(check("attention", worst, 1e-12, format!("alpha_s + alpha_t over {trials} random layers")))
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Draw a live `(param, index)` pair.
fn live_index(params: &[&Param], rng: &mut Rng) -> (usize, usize) {
    loop {
        let pi = rng.below(params.len());
        let i = rng.below(params[pi].numel());
        if params[pi].is_live(i) {
            return (pi, i);
        }
    }
}

/// Central differences on a hybrid layer with attention, loss `⟨y, g⟩`.
pub fn layer_gradient_check(samples: usize, seed: u64) -> Result<Check> {
    let mut rng = Rng::new(seed);
    let layout = build_layout_with(8, 8, Proportion::one_over(4)?, Variant::Hybrid, false)?;
    let spec = ConvSpec::same(3, 3, 3).with_temporal_dilation(2);
    let mut l = SthLayer::new("grad", layout, spec)?.with_attention(4, &mut rng)?;
    l.init(&mut rng);
    for p in l.attn.as_mut().expect("attention enabled").params_mut() {
        if p.value.dims().len() == 1 {
            p.init_uniform(&mut rng, 0.5);
        }
    }
    let x = Tensor::random_uniform(&[2, 8, 4, 4, 4], rng.next_u64(), -1.0, 1.0)?;
    let (y, state) = sth_layer_forward(&x, &l)?;
    let g = Tensor::random_uniform(y.dims(), rng.next_u64(), -1.0, 1.0)?;
    let (_, grads) = sth_backward(&l, &state, &g)?;
    let mut analytic: Vec<&Tensor> = vec![&grads.w_spatial, &grads.w_temporal];
    analytic.extend(grads.attn.as_ref().expect("attention enabled"));
    let loss = |l: &SthLayer| -> Result<f64> { sth_layer_forward(&x, l)?.0.dot(&g) };
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = l.clone();
    for _ in 0..samples {
        let (pi, i) = live_index(&l.params(), &mut rng);
        let orig = l.params()[pi].value.data()[i];
        probe.params_mut()[pi].value.data_mut()[i] = orig + eps;
        let lp = loss(&probe)?;
        probe.params_mut()[pi].value.data_mut()[i] = orig - eps;
        let lm = loss(&probe)?;
        probe.params_mut()[pi].value.data_mut()[i] = orig;
        let (a, n) = (analytic[pi].data()[i], (lp - lm) / (2.0 * eps));
        // both sides below roundoff carry no information
        if a.abs().max(n.abs()) > 1e-7 {
            worst = worst.max(rel(a, n));
        }
    }
    Ok(check("grad/layer", worst, 1e-5, format!("{samples} parameters, attention on")))
}

/// Central differences through a scale-16 network with attention.
pub fn network_gradient_check(samples: usize, seed: u64) -> Result<Check> {
    let cfg = NetworkConfig { p: Proportion::one_over(4)?, attention: true, ..NetworkConfig::desk(16, 28, 4, 5) };
    let mut net = build_sth_network(&cfg, seed)?;
    let mut rng = Rng::new(seed ^ 0x5eed);
    let clip = Tensor::random_uniform(&[2, 3, 4, 28, 28], rng.next_u64(), 0.0, 1.0)?;
    let (logits, cache) = net.forward(&clip, true)?;
    let g = Tensor::random_uniform(logits.dims(), rng.next_u64(), -1.0, 1.0)?;
    net.zero_grad();
    net.backward(&cache, &g)?;
    let loss = |n: &Network| -> Result<f64> { n.forward(&clip, true)?.0.dot(&g) };
    // larger steps straddle ReLU kinks in a network this small; f64 keeps
    // roundoff well below the tolerance at this step
    let eps = 1e-7;
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for _ in 0..samples {
        let (pi, i) = live_index(&net.params(), &mut rng);
        let orig = net.params()[pi].value.data()[i];
        probe.params_mut()[pi].value.data_mut()[i] = orig + eps;
        let lp = loss(&probe)?;
        probe.params_mut()[pi].value.data_mut()[i] = orig - eps;
        let lm = loss(&probe)?;
        probe.params_mut()[pi].value.data_mut()[i] = orig;
        let a = net.params()[pi].grad.data()[i];
        worst = worst.max(rel(a, (lp - lm) / (2.0 * eps)));
    }
    Ok(check("grad/network", worst, 1e-4, format!("{samples} parameters, scale 16, attention on")))
}

/// Output sizes of the full-size network, `[C, T, H, W]` per named stage.
pub fn full_size_chain() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("Conv1", vec![64, 8, 112, 112]),
        ("Pool1", vec![64, 8, 56, 56]),
        ("Conv2_x", vec![256, 8, 56, 56]),
        ("Conv3_x", vec![512, 8, 28, 28]),
        ("Conv4_x", vec![1024, 8, 14, 14]),
        ("Conv5_x", vec![2048, 8, 7, 7]),
        ("Pool5", vec![2048, 8, 1, 1]),
        ("FC", vec![8, 174]),
        ("Consensus", vec![1, 174]),
    ]
}

/// Compare the planned full-size chain against [`full_size_chain`] and the
/// executed desk-size chain against its plan. Returns the check and the
/// printable chain.
pub fn shapes_check() -> Result<(Check, String)> {
    let mut text = String::new();
    let mut mismatches = 0usize;
    let full = plan(&NetworkConfig::full_size(174))?;
    let want = full_size_chain();
    for (i, (name, dims)) in want.iter().enumerate() {
        let got = full.trace.get(i);
        let ok = got.is_some_and(|(n, d)| n == name && d == dims);
        mismatches += !ok as usize;
        let shown = got.map_or("missing".to_string(), |(_, d)| format!("{d:?}"));
        text.push_str(&format!("  {:<10} {:<22} {}\n", name, shown, if ok { "ok" } else { "MISMATCH" }));
    }
    mismatches += full.trace.len().saturating_sub(want.len());

    let desk = NetworkConfig::desk(8, 56, 8, 4);
    let net = build_sth_network(&desk, 0)?;
    let clip = Tensor::random_uniform(&[1, 3, 8, 56, 56], 1, 0.0, 1.0)?;
    let (_, cache) = net.forward(&clip, false)?;
    let desk_ok = cache.trace == plan(&desk)?.trace;
    mismatches += !desk_ok as usize;
    let detail = format!("{} named layers, executed desk trace {}", want.len(), if desk_ok { "matches" } else { "differs" });
    Ok((check("shapes", mismatches as f64, 0.5, detail), text))
}

/// Build a tiny motion dataset usable for attention statistics.
pub fn tiny_motion(samples_per_class: usize, seed: u64) -> Result<Dataset> {
    Dataset::synth(&SynthConfig { resolution: 32, object_size: 6, frames_total: 8, ..SynthConfig::motion(samples_per_class, seed) })
}

/// Run every check in `scope`, calling `report` as each finishes.
pub fn run(scope: Scope, seed: u64, mut report: impl FnMut(&Check, Option<&str>)) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut push = |c: Check, extra: Option<String>| {
        report(&c, extra.as_deref());
        out.push(c);
    };
    if matches!(scope, Scope::Oracle | Scope::All) {
        push(oracle_suite(50, seed)?, None);
        push(attention_sum_check(20, seed)?, None);
    }
    if matches!(scope, Scope::Grad | Scope::All) {
        push(layer_gradient_check(60, seed)?, None);
        push(network_gradient_check(30, seed)?, None);
    }
    if matches!(scope, Scope::Shapes | Scope::All) {
        let (c, text) = shapes_check()?;
        push(c, Some(text));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_parse() {
        assert_eq!("grad".parse::<Scope>().unwrap(), Scope::Grad);
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn random_cases_are_valid_layers() {
        let mut rng = Rng::new(4);
        for i in 0..200 {
            OracleCase::random(&mut rng).layer(i).unwrap();
        }
    }

    #[test]
    fn oracle_detects_a_corrupted_layer() {
        let case = OracleCase {
            c_in: 4,
            c_out: 4,
            p: Proportion::one_over(2).unwrap(),
            variant: Variant::Hybrid,
            dilation: 1,
            stride: 1,
            kernel_t: 3,
            input: [1, 4, 3, 4, 4],
        };
        let l = case.layer(1).unwrap();
        let x = Tensor::random_uniform(&case.input, 2, -1.0, 1.0).unwrap();
        assert!(oracle_gap(&l, &x).unwrap() < 1e-10);
        // one live temporal tap changed after the dense kernel was taken
        let dense = conv3d_naive(&x, &expand_to_masked_3d(&l).unwrap(), &masked_3d_spec(&l)).unwrap();
        let mut bent = l.clone();
        let live = (0..bent.w_temporal.numel()).find(|&i| bent.w_temporal.is_live(i)).unwrap();
        bent.w_temporal.value.data_mut()[live] += 0.25;
        let (os, ot) = sth_forward(&x, &bent).unwrap();
        assert!(os.add(&ot).unwrap().max_abs_diff(&dense).unwrap() > 1e-3);
    }

    #[test]
    fn shapes_pass() {
        let (c, text) = shapes_check().unwrap();
        assert!(c.passed, "{c}\n{text}");
        assert_eq!(text.lines().count(), 9);
    }
}

//! Per-channel batch normalization over `(N, T, H, W)` on channel-major
//! activations.

use crate::param::{Buffer, Param, ParamKind};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    x: Vec<f64>,
    /// statistics used for normalization (batch ones in train mode)
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// unbiased batch variance, for the running statistics
    batch_var: Vec<f64>,
    train: bool,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        let t = |v: f64| Tensor::full(&[channels], v).expect("channels > 0");
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), ParamKind::NormScale, t(1.0)),
            beta: Param::new(format!("{name}.beta"), ParamKind::NormShift, t(0.0)),
            running_mean: Buffer { name: format!("{name}.running_mean"), value: t(0.0) },
            running_var: Buffer { name: format!("{name}.running_var"), value: t(1.0) },
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// `x` is `(C, L)`; train mode normalizes with batch statistics.
    /// `relu` applies a ReLU to the output.
    pub(crate) fn forward(&self, x: Vec<f64>, train: bool, relu: bool) -> (Vec<f64>, NormCache) {
        let c = self.channels();
        let len = x.len() / c;
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut y = Vec::with_capacity(x.len());
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        for (ch, row) in x.chunks_exact(len).enumerate() {
            let (m, var) = if train {
                let m = sum(row) / len as f64;
                let var = sum_sq_dev(row, m) / len as f64;
                batch_var[ch] = if len > 1 { var * len as f64 / (len - 1) as f64 } else { var };
                (m, var)
            } else {
                (self.running_mean.value.data()[ch], self.running_var.value.data()[ch])
            };
            let is = 1.0 / (var + EPS).sqrt();
            mean[ch] = m;
            inv_std[ch] = is;
            let (k, b) = (gamma[ch] * is, beta[ch] - gamma[ch] * is * m);
            if relu {
                y.extend(row.iter().map(|&v| (k * v + b).max(0.0)));
            } else {
                y.extend(row.iter().map(|&v| k * v + b));
            }
        }
        (y, NormCache { x, mean, inv_std, batch_var, train })
    }

    /// Accumulates `γ, β` gradients and returns the input gradient.
    pub(crate) fn backward(&mut self, cache: &NormCache, gy: &[f64]) -> Vec<f64> {
        let c = self.channels();
        let len = gy.len() / c;
        let mut gx = Vec::with_capacity(gy.len());
        let mut g_gamma = vec![0.0; c];
        let mut g_beta = vec![0.0; c];
        let gamma = self.gamma.value.data();
        for (ch, (g, x)) in gy.chunks_exact(len).zip(cache.x.chunks_exact(len)).enumerate() {
            let (m, is) = (cache.mean[ch], cache.inv_std[ch]);
            let sum_g = sum(g);
            // Σ g·x̂ with x̂ = (x − m)·is
            let sum_gh = (dot(g, x) - m * sum_g) * is;
            g_beta[ch] = sum_g;
            g_gamma[ch] = sum_gh;
            let k = gamma[ch] * is;
            if cache.train {
                let (mg, mgh) = (sum_g / len as f64, sum_gh / len as f64);
                gx.extend(g.iter().zip(x).map(|(&gq, &xq)| k * (gq - mg - (xq - m) * is * mgh)));
            } else {
                gx.extend(g.iter().map(|&gq| k * gq));
            }
        }
        self.gamma.accumulate(&g_gamma);
        self.beta.accumulate(&g_beta);
        gx
    }

    pub(crate) fn update_running(&mut self, cache: &NormCache) {
        if !cache.train {
            return;
        }
        let rm = self.running_mean.value.data_mut();
        for (r, m) in rm.iter_mut().zip(&cache.mean) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * m;
        }
        let rv = self.running_var.value.data_mut();
        for (r, v) in rv.iter_mut().zip(&cache.batch_var) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * v;
        }
    }
}

const LANES: usize = 8;

/// Sum with independent partial accumulators, so the loop vectorizes.
pub(crate) fn sum(x: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let mut it = x.chunks_exact(LANES);
    for c in &mut it {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().sum::<f64>() + it.remainder().iter().sum::<f64>()
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (mut ix, mut iy) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    for (a, b) in (&mut ix).zip(&mut iy) {
        for ((s, p), q) in acc.iter_mut().zip(a).zip(b) {
            *s += p * q;
        }
    }
    acc.iter().sum::<f64>() + ix.remainder().iter().zip(iy.remainder()).map(|(p, q)| p * q).sum::<f64>()
}

fn sum_sq_dev(x: &[f64], mean: f64) -> f64 {
    let mut acc = [0.0; LANES];
    let mut it = x.chunks_exact(LANES);
    for c in &mut it {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += (v - mean) * (v - mean);
        }
    }
    acc.iter().sum::<f64>() + it.remainder().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward(out: &[f64], g: &mut [f64]) {
    for (gv, &o) in g.iter_mut().zip(out) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn objective(bn: &BatchNorm, x: &[f64], g: &[f64], train: bool) -> f64 {
        bn.forward(x.to_vec(), train, false).0.iter().zip(g).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = Rng::new(1);
        for train in [true, false] {
            let mut bn = BatchNorm::new("bn", 3);
            bn.gamma.init_uniform(&mut rng, 2.0);
            bn.beta.init_uniform(&mut rng, 1.0);
            bn.running_mean.value.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
            let x: Vec<f64> = (0..3 * 10).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let g: Vec<f64> = (0..x.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let (_, cache) = bn.forward(x.clone(), train, false);
            let gx = bn.backward(&cache, &g);
            let eps = 1e-6;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += eps;
                let mut xm = x.clone();
                xm[i] -= eps;
                let num = (objective(&bn, &xp, &g, train) - objective(&bn, &xm, &g, train)) / (2.0 * eps);
                assert!((num - gx[i]).abs() < 1e-7 * num.abs().max(1.0), "{train} x[{i}]: {num} vs {}", gx[i]);
            }
            for ch in 0..3 {
                let mut p = bn.clone();
                p.gamma.value.data_mut()[ch] += eps;
                let mut m = bn.clone();
                m.gamma.value.data_mut()[ch] -= eps;
                let num = (objective(&p, &x, &g, train) - objective(&m, &x, &g, train)) / (2.0 * eps);
                assert!((num - bn.gamma.grad.data()[ch]).abs() < 1e-7);
                let num_b: f64 = g[ch * 10..(ch + 1) * 10].iter().sum();
                assert!((num_b - bn.beta.grad.data()[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_normalizes_and_tracks() {
        let mut bn = BatchNorm::new("bn", 2);
        let x = [1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        let (y, cache) = bn.forward(x.to_vec(), true, false);
        let m: f64 = y[..4].iter().sum::<f64>() / 4.0;
        let v: f64 = y[..4].iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.25 / (1.25 + EPS)).abs() < 1e-12);
        assert!(y[4..].iter().all(|&a| a == 0.0));
        bn.update_running(&cache);
        assert!((bn.running_mean.value.data()[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_mean.value.data()[1] - 1.0).abs() < 1e-12);
        // unbiased variance 5/3 folded in with momentum 0.1
        assert!((bn.running_var.value.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn fused_relu_clamps_output() {
        let mut rng = Rng::new(4);
        let mut bn = BatchNorm::new("bn", 2);
        bn.beta.init_uniform(&mut rng, 1.0);
        let x: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut plain = bn.forward(x.clone(), true, false).0;
        relu_inplace(&mut plain);
        assert_eq!(bn.forward(x, true, true).0, plain);
    }

    #[test]
    fn relu_pair() {
        let mut x = vec![-1.0, 0.0, 2.0];
        relu_inplace(&mut x);
        assert_eq!(x, [0.0, 0.0, 2.0]);
        let mut g = vec![5.0, 5.0, 5.0];
        relu_backward(&x, &mut g);
        assert_eq!(g, [0.0, 0.0, 5.0]);
    }
}

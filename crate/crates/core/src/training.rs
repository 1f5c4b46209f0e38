//! Loss, optimizer, training and evaluation loops, and a finite-difference
//! gradient checker.

use crate::data::{Dataset, TsnMode};
use crate::error::{Error, Result};
use crate::network::{consensus, Network};
use crate::param::Param;
use crate::rng::Rng;
use crate::sth::SthLayer;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// epochs at which the learning rate is multiplied by `lr_decay`
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    /// frames sampled per clip
    pub segments: usize,
    pub clips_per_video: usize,
    /// stop once validation top-1 reaches this
    pub target_top1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 16,
            lr_steps: vec![20, 25],
            lr_decay: 0.1,
            seed: 0,
            segments: 8,
            clips_per_video: 1,
            target_top1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.segments == 0 || self.clips_per_video == 0 {
            return Err(Error::InvalidArgument("batch size, segments and clips per video must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| epoch >= s).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// Mean cross-entropy of `logits` `(N, K)` and its gradient.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!("logits {:?} for {} labels", d, labels.len())));
    }
    let (n, k) = (d[0], d[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, row) in logits.data().chunks_exact(k).enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += lse - row[labels[i]];
        for (j, v) in row.iter().enumerate() {
            grad[i * k + j] = ((v - lse).exp() - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, k], grad)?))
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[&Param]) -> Self {
        OptimizerState { velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect() }
    }
}

/// `v ← μv + g + λθ; θ ← θ − lr·v`, then masks are re-applied. Weight decay
/// only touches parameters whose kind decays.
pub fn sgd_step(params: &mut [&mut Param], state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} velocity buffers",
            params.len(),
            state.velocity.len()
        )));
    }
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if v.len() != p.numel() || p.grad.numel() != p.numel() {
            return Err(Error::ShapeMismatch(format!("{}: velocity or gradient size differs", p.name)));
        }
        let wd = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
        let g = p.grad.data().to_vec();
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            v[i] = cfg.momentum * v[i] + g[i] + wd * theta[i];
            theta[i] -= lr * v[i];
        }
        if let Some(mask) = &p.mask {
            for (vi, &live) in v.iter_mut().zip(mask) {
                if !live {
                    *vi = 0.0;
                }
            }
        }
        p.apply_mask();
    }
    Ok(())
}

/// Frame-logit gradient `(N, T, K)` for a video-logit gradient under
/// average consensus.
fn consensus_backward(g_video: &Tensor, frames: usize) -> Result<Tensor> {
    let d = g_video.dims();
    let (n, k) = (d[0], d[1]);
    let mut out = Vec::with_capacity(n * frames * k);
    for row in g_video.data().chunks_exact(k) {
        for _ in 0..frames {
            out.extend(row.iter().map(|v| v / frames as f64));
        }
    }
    Tensor::from_vec(&[n, frames, k], out)
}

/// Train-mode loss on one batch; accumulates gradients into `net` after
/// zeroing them. Running statistics are left untouched.
pub fn network_loss_and_grad(net: &mut Network, clip: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    net.zero_grad();
    let (frame_logits, cache) = net.forward(clip, true)?;
    let video = consensus(&frame_logits)?;
    let (loss, g) = cross_entropy(&video, labels)?;
    net.backward(&cache, &consensus_backward(&g, frame_logits.dims()[1])?)?;
    Ok((loss, video))
}

/// Train-mode loss on one batch without gradients.
pub fn network_loss(net: &Network, clip: &Tensor, labels: &[usize]) -> Result<f64> {
    let (frame_logits, _) = net.forward(clip, true)?;
    cross_entropy(&consensus(&frame_logits)?, labels).map(|(l, _)| l)
}

fn topk_hits(logits: &Tensor, labels: &[usize], k: usize) -> usize {
    let kk = logits.dims()[1];
    logits
        .data()
        .chunks_exact(kk)
        .zip(labels)
        .filter(|(row, &y)| {
            // rank of the true class: number of classes scoring strictly higher
            let above = row.iter().filter(|&&v| v > row[y]).count();
            above < k
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    Rng::split(seed, epoch as u64 + 1).next_u64()
}

/// One pass over `data` in a seeded shuffled order; one SGD step per batch.
pub fn train_epoch(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let seed = epoch_seed(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let lr = cfg.lr_at(epoch);
    let (mut loss_sum, mut top1, mut top5) = (0.0, 0usize, 0usize);
    for ids in order.chunks(cfg.batch_size) {
        let clip = data.batch(ids, cfg.segments, TsnMode::Train, seed)?;
        let labels: Vec<usize> = ids.iter().map(|&i| data.videos[i].label).collect();
        net.zero_grad();
        let (frame_logits, cache) = net.forward(&clip, true)?;
        let video = consensus(&frame_logits)?;
        let (loss, g) = cross_entropy(&video, &labels)?;
        net.backward(&cache, &consensus_backward(&g, frame_logits.dims()[1])?)?;
        net.update_running_stats(&cache);
        sgd_step(&mut net.params_mut(), state, lr, cfg)?;
        loss_sum += loss * ids.len() as f64;
        top1 += topk_hits(&video, &labels, 1);
        top5 += topk_hits(&video, &labels, 5);
    }
    let n = data.len() as f64;
    Ok(EpochMetrics { loss: loss_sum / n, top1: top1 as f64 / n, top5: top5 as f64 / n })
}

/// Video logits `(N, K)` in evaluation mode, averaged over `clips_per_video`
/// evenly placed clips.
pub fn predict(net: &Network, data: &Dataset, segments: usize, clips_per_video: usize, batch_size: usize) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = ids.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|ids| -> Result<Vec<f64>> {
            let mut acc: Option<Tensor> = None;
            for j in 0..clips_per_video {
                let mode = if clips_per_video == 1 { TsnMode::Test } else { TsnMode::Clip { index: j, count: clips_per_video } };
                let clip = data.batch(ids, segments, mode, 0)?;
                let v = consensus(&net.predict(&clip)?)?;
                acc = Some(match acc {
                    Some(a) => a.add(&v)?,
                    None => v,
                });
            }
            Ok(acc.expect("at least one clip").scale(1.0 / clips_per_video as f64).into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_vec(&[data.len(), data.num_class], parts.concat())
}

/// Loss and top-1/top-5 accuracy in evaluation mode.
pub fn evaluate(net: &Network, data: &Dataset, segments: usize, clips_per_video: usize) -> Result<EpochMetrics> {
    let logits = predict(net, data, segments, clips_per_video, 16)?;
    let labels = data.labels();
    let (loss, _) = cross_entropy(&logits, &labels)?;
    let n = data.len() as f64;
    Ok(EpochMetrics {
        loss,
        top1: topk_hits(&logits, &labels, 1) as f64 / n,
        top5: topk_hits(&logits, &labels, 5) as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub metrics: EpochMetrics,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<MetricsRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,top1,top5,lr\n");
        for r in &self.rows {
            let m = r.metrics;
            let _ = writeln!(s, "{},{},{:.6},{:.4},{:.4},{}", r.epoch, r.split, m.loss, m.top1, m.top5, r.lr);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Latest validation metrics.
    pub fn last_val(&self) -> Option<EpochMetrics> {
        self.rows.iter().rev().find(|r| r.split == "val").map(|r| r.metrics)
    }

    pub fn best_val_top1(&self) -> Option<f64> {
        self.rows.iter().filter(|r| r.split == "val").map(|r| r.metrics.top1).reduce(f64::max)
    }
}

/// Train for `cfg.epochs`, evaluating on `val` after every epoch. Stops early
/// once validation top-1 reaches `cfg.target_top1`.
pub fn fit(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<History> {
    cfg.validate()?;
    let mut state = OptimizerState::new(&net.params());
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let tm = train_epoch(net, train, cfg, &mut state, epoch)?;
        let vm = evaluate(net, val, cfg.segments, cfg.clips_per_video)?;
        for (split, metrics) in [("train", tm), ("val", vm)] {
            let row = MetricsRow { epoch: epoch + 1, split: split.into(), metrics, lr };
            on_epoch(&row);
            history.rows.push(row);
        }
        if cfg.target_top1.is_some_and(|t| vm.top1 >= t) {
            break;
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Something with an ordered parameter list.
pub trait Trainable: Clone {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

impl Trainable for Network {
    fn params(&self) -> Vec<&Param> {
        Network::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Network::params_mut(self)
    }
}

impl Trainable for SthLayer {
    fn params(&self) -> Vec<&Param> {
        SthLayer::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        SthLayer::params_mut(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index)` of the worst sample
    pub worst: Option<(String, usize)>,
}

/// Compare the gradients stored in `model` against central differences of
/// `loss` on `samples` scalars drawn uniformly over all parameters.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn finite_difference_check<M: Trainable>(
    model: &M,
    loss: impl Fn(&M) -> f64,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps must be in [1e-7, 1e-3], got {eps}")));
    }
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("model has no parameters".into()));
    }
    let mut rng = Rng::new(seed);
    let mut report = FdReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut probe = model.clone();
    for _ in 0..samples {
        let mut flat = rng.below(total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let analytic = model.params()[pi].grad.data()[flat];
        let orig = model.params()[pi].value.data()[flat];
        probe.params_mut()[pi].value.data_mut()[flat] = orig + eps;
        let lp = loss(&probe);
        probe.params_mut()[pi].value.data_mut()[flat] = orig - eps;
        let lm = loss(&probe);
        probe.params_mut()[pi].value.data_mut()[flat] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((model.params()[pi].name.clone(), flat));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ConvSpec;
    use crate::layout::{build_layout, Proportion};
    use crate::param::ParamKind;
    use crate::sth::sth_layer_forward;

    #[test]
    fn cross_entropy_values() {
        let (l, _) = cross_entropy(&Tensor::zeros(&[2, 4]).unwrap(), &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, g) = cross_entropy(&Tensor::from_vec(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap(), &[1]).unwrap();
        assert!(l.abs() < 1e-12 && g.data().iter().all(|v| v.abs() < 1e-12));
        assert!(cross_entropy(&Tensor::zeros(&[1, 3]).unwrap(), &[3]).is_err());
        assert!(cross_entropy(&Tensor::zeros(&[2, 3]).unwrap(), &[0]).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = Tensor::random_uniform(&[3, 5], 1, -3.0, 3.0).unwrap();
        let y = [4, 0, 2];
        let (_, g) = cross_entropy(&x, &y).unwrap();
        let eps = 1e-5;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let num = (cross_entropy(&p, &y).unwrap().0 - cross_entropy(&m, &y).unwrap().0) / (2.0 * eps);
            let a = g.data()[i];
            assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-12) < 1e-8, "{i}: {a:e} vs {num:e}");
        }
    }

    fn param(v: Vec<f64>, kind: ParamKind) -> Param {
        let n = v.len();
        Param::new("p", kind, Tensor::from_vec(&[n], v).unwrap())
    }

    #[test]
    fn sgd_recurrences() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = param(vec![1.0, -2.0], ParamKind::ConvWeight);
        let mut st = OptimizerState::new(&[&p]);
        sgd_step(&mut [&mut p], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p.value.data(), [1.0, -2.0]);

        let cfg = TrainConfig { weight_decay: 0.01, ..TrainConfig::default() };
        sgd_step(&mut [&mut p], &mut st, 0.1, &cfg).unwrap();
        assert!((p.value.data()[0] - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        let mut b = param(vec![1.0], ParamKind::NormScale);
        let mut sb = OptimizerState::new(&[&b]);
        sgd_step(&mut [&mut b], &mut sb, 0.1, &cfg).unwrap();
        assert_eq!(b.value.data(), [1.0]);

        let cfg = TrainConfig { weight_decay: 0.0, momentum: 0.9, ..TrainConfig::default() };
        let mut p = param(vec![0.0], ParamKind::ConvWeight);
        let mut st = OptimizerState::new(&[&p]);
        let g = 0.5;
        for _ in 0..2 {
            p.grad.data_mut()[0] = g;
            sgd_step(&mut [&mut p], &mut st, 0.1, &cfg).unwrap();
        }
        assert!((st.velocity[0][0] - 1.9 * g).abs() < 1e-15);
        assert!((p.value.data()[0] + 0.1 * (g + 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn masks_survive_steps() {
        let layout = build_layout(8, 8, Proportion::one_over(4).unwrap()).unwrap();
        let mut l = SthLayer::new("l", layout, ConvSpec::same(3, 3, 3)).unwrap();
        l.init(&mut Rng::new(2));
        let mut st = OptimizerState::new(&l.params());
        let cfg = TrainConfig::default();
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            for p in l.params_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g = rng.uniform(-1.0, 1.0));
            }
            sgd_step(&mut l.params_mut(), &mut st, 0.1, &cfg).unwrap();
        }
        for (p, v) in l.params().iter().zip(&st.velocity) {
            for i in 0..p.numel() {
                if !p.is_live(i) {
                    assert_eq!(p.value.data()[i], 0.0);
                    assert_eq!(v[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig { lr: 1.0, lr_steps: vec![2, 4], ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..6).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[..2], [1.0, 1.0]);
        assert!((lrs[2] - 0.1).abs() < 1e-15 && (lrs[5] - 0.01).abs() < 1e-15);
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn topk_counts_rank() {
        let l = Tensor::from_vec(&[2, 3], vec![0.1, 0.5, 0.2, 0.9, 0.0, 0.3]).unwrap();
        assert_eq!(topk_hits(&l, &[1, 2], 1), 1);
        assert_eq!(topk_hits(&l, &[1, 2], 2), 2);
        assert_eq!(topk_hits(&l, &[1, 1], 5), 2);
    }

    #[test]
    fn fd_exact_for_linear_layer() {
        let layout = build_layout(4, 4, Proportion::ZERO).unwrap();
        let mut l = SthLayer::new("l", layout, ConvSpec::same(3, 3, 3)).unwrap();
        l.init(&mut Rng::new(4));
        let x = Tensor::random_uniform(&[1, 4, 3, 4, 4], 5, -1.0, 1.0).unwrap();
        let (y, state) = sth_layer_forward(&x, &l).unwrap();
        let (_, grads) = crate::sth::sth_backward(&l, &state, &Tensor::ones(y.dims()).unwrap()).unwrap();
        l.w_spatial.grad = grads.w_spatial;
        l.w_temporal.grad = grads.w_temporal;
        let report =
            finite_difference_check(&l, |m: &SthLayer| sth_layer_forward(&x, m).unwrap().0.sum(), 40, 1e-4, 6).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.checked, 40);
        // every temporal weight is structural at p = 0: both sides are zero
        let only_t = |m: &SthLayer| {
            let mut z = m.clone();
            z.w_spatial.value.data_mut().fill(0.0);
            sth_layer_forward(&x, &z).unwrap().0.sum()
        };
        let mut t_only = l.clone();
        t_only.w_spatial.grad.data_mut().fill(0.0);
        let r = finite_difference_check(&t_only, only_t, 20, 1e-4, 7).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(finite_difference_check(&l, |_: &SthLayer| 0.0, 1, 1e-2, 0).is_err());
    }
}

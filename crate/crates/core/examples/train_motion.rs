//! Train a small network on the motion task and report validation accuracy.

use ::sth::config::RunConfig;
use ::sth::data::Dataset;
use ::sth::training::fit;
use ::sth::{build_sth_network, Proportion};

fn main() -> ::sth::Result<()> {
    let mut cfg = RunConfig::default().with_seed(1);
    cfg.net.scale_factor = 16;
    cfg.net.input_hw = 32;
    cfg.data.resolution = 32;
    cfg.data.object_size = 6;
    cfg.data.frames_total = 8;
    cfg.data.samples_per_class = 60;
    cfg.val_per_class = 10;
    cfg.net.p = Proportion::one_over(4)?;
    cfg.train.epochs = 10;
    cfg.train.lr = 0.02;
    cfg.train.lr_steps.clear();

    let train = Dataset::synth(&cfg.train_data())?;
    let val = Dataset::synth(&cfg.val_data())?;
    let mut net = build_sth_network(&cfg.net, cfg.train.seed)?;
    let history = fit(&mut net, &train, &val, &cfg.train, |row| {
        println!("epoch {} {:<5} loss {:.4} top1 {:.3}", row.epoch, row.split, row.metrics.loss, row.metrics.top1);
    })?;
    println!("best val top1 {:.3}", history.best_val_top1().unwrap_or(0.0));
    Ok(())
}

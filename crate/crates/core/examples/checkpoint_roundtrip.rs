//! Save a network, load it back and compare predictions.

use ::sth::checkpoint::{load_checkpoint, save_checkpoint};
use ::sth::{build_sth_network, network_forward, NetworkConfig, Tensor};

fn main() -> ::sth::Result<()> {
    let cfg = NetworkConfig::desk(16, 32, 4, 4);
    let net = build_sth_network(&cfg, 2)?;
    let dir = std::env::temp_dir().join("sth-checkpoint-example");
    save_checkpoint(&net, &dir)?;
    let back = load_checkpoint(&dir)?;

    let clip = Tensor::random_uniform(&[2, 3, 4, 32, 32], 8, -1.0, 1.0)?;
    let a = network_forward(&net, &clip)?;
    let b = network_forward(&back, &clip)?;
    let gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    // weights are stored as f32
    println!("max logit gap after reload {gap:.2e}");
    Ok(())
}

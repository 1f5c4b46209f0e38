//! Per-layer branch weights of an attention network.

use ::sth::analysis::{attention_csv, export_attention_stats};
use ::sth::build_sth_network;
use ::sth::data::{Dataset, SynthConfig};
use ::sth::NetworkConfig;

fn main() -> ::sth::Result<()> {
    let mut cfg = NetworkConfig::desk(16, 32, 4, 4);
    cfg.attention = true;
    let net = build_sth_network(&cfg, 0)?;
    let mut data = SynthConfig::motion(2, 4);
    data.resolution = 32;
    data.object_size = 6;
    data.frames_total = 8;
    let data = Dataset::synth(&data)?;
    print!("{}", attention_csv(&export_attention_stats(&net, &data, 4)?));
    Ok(())
}

//! Parameter and GFLOP totals of the full-size network across `p`.

use ::sth::analysis::{cost_report, sweep_p, sweep_text};
use ::sth::{NetworkConfig, Proportion};

fn main() -> ::sth::Result<()> {
    let cfg = NetworkConfig::full_size(174);
    let report = cost_report(&cfg)?;
    println!("{:.3} M params, {:.3} GFLOPs", report.mparams(), report.gflops());

    let ps = [Proportion::ZERO, Proportion::one_over(8)?, Proportion::one_over(4)?, Proportion::one_over(2)?];
    print!("{}", sweep_text(&sweep_p(&cfg, &ps)?));

    let with_attention = NetworkConfig { attention: true, ..cfg };
    println!("with attention: {:.3} M params", cost_report(&with_attention)?.mparams());
    Ok(())
}

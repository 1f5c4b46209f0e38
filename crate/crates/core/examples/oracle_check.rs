//! Compare the two-branch layer against a dense 3D convolution with the
//! inactive kernel taps masked to zero.

use ::sth::rng::Rng;
use ::sth::verify::{oracle_gap, OracleCase};
use ::sth::Tensor;

fn main() -> ::sth::Result<()> {
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let case = OracleCase::random(&mut rng);
        let layer = case.layer(i)?;
        let x = Tensor::random_uniform(&case.input, 100 + i, -1.0, 1.0)?;
        let gap = oracle_gap(&layer, &x)?;
        println!("{:>3} -> {:<3} p={} {:?} dil {} stride {}  gap {gap:.2e}", case.c_in, case.c_out, case.p, case.variant, case.dilation, case.stride);
        worst = worst.max(gap);
    }
    println!("worst {worst:.2e}");
    Ok(())
}

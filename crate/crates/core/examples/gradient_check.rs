//! Finite-difference checks of the layer and whole-network gradients.

use ::sth::verify::{layer_gradient_check, network_gradient_check};

fn main() -> ::sth::Result<()> {
    println!("{}", layer_gradient_check(40, 1)?);
    println!("{}", network_gradient_check(20, 1)?);
    Ok(())
}

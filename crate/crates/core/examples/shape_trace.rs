//! Activation shapes through the full-size stack.

use ::sth::verify::{shapes_check, full_size_chain};

fn main() -> ::sth::Result<()> {
    for (name, dims) in full_size_chain() {
        println!("{name:<10} {dims:?}");
    }
    let (check, trace) = shapes_check()?;
    print!("{trace}");
    println!("{check}");
    Ok(())
}

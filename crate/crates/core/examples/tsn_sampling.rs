//! Segment-based frame sampling in train, test and multi-clip modes.

use ::sth::data::{tsn_indices, TsnMode};
use ::sth::rng::Rng;

fn main() -> ::sth::Result<()> {
    let mut rng = Rng::new(0);
    for _ in 0..3 {
        println!("train  {:?}", tsn_indices(32, 8, TsnMode::Train, &mut rng)?);
    }
    println!("test   {:?}", tsn_indices(32, 8, TsnMode::Test, &mut rng)?);
    for index in 0..2 {
        println!("clip {index} {:?}", tsn_indices(32, 8, TsnMode::Clip { index, count: 2 }, &mut rng)?);
    }
    Ok(())
}

//! Build one hybrid layer, show which channels go temporal, run it forward.

use ::sth::conv::ConvSpec;
use ::sth::rng::Rng;
use ::sth::sth::sth_layer_forward;
use ::sth::{build_layout, Proportion, SthLayer, Tensor};

fn main() -> ::sth::Result<()> {
    let layout = build_layout(8, 8, Proportion::one_over(4)?)?;
    for m in 0..8 {
        let row: String = (0..8).map(|c| if layout.is_temporal(m, c) { 'T' } else { 's' }).collect();
        println!("out {m} type {} {row}", layout.type_of_output_channel(m));
    }

    let mut rng = Rng::new(3);
    let mut layer = SthLayer::new("demo", layout, ConvSpec::same(3, 3, 3))?.with_attention(4, &mut rng)?;
    layer.init(&mut rng);
    let x = Tensor::random_uniform(&[2, 8, 4, 6, 6], 9, -1.0, 1.0)?;
    let (y, state) = sth_layer_forward(&x, &layer)?;
    println!("output {:?}", y.dims());
    if let Some((a_s, a_t)) = state.alphas() {
        println!("alpha_s[0] {:.4}  alpha_t[0] {:.4}", a_s.data()[0], a_t.data()[0]);
    }
    Ok(())
}

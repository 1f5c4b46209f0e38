//! Generate a small motion dataset on disk and read it back.

use ::sth::data::{gen_motion_dataset, load_manifest, SynthConfig};

fn main() -> ::sth::Result<()> {
    let dir = std::env::temp_dir().join("sth-synth-example");
    let cfg = SynthConfig::motion(3, 1);
    let manifest = gen_motion_dataset(&cfg, &dir, "train")?;
    print!("{}", manifest.render());

    let data = load_manifest(dir.join("train.tsv"))?.load_dataset()?;
    println!("{} videos, labels {:?}", data.len(), data.labels());
    println!("channel means {:?}", data.mean);
    Ok(())
}

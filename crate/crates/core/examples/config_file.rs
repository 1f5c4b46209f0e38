//! Parse a run config from text and print the normalized form.

use ::sth::config::RunConfig;

fn main() -> ::sth::Result<()> {
    let text = "\
net.p = 1/8
net.attention = on
train.epochs = 10
data.task = appearance
";
    let cfg = RunConfig::parse(text)?;
    print!("{}", cfg.to_text());
    match RunConfig::parse("net.p = 3/4\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => println!("accepted"),
    }
    Ok(())
}

//! Write the synthetic texture dataset to a directory and summarize it.
//!
//! `cargo run --release --example synth_dataset -- /tmp/textures`

use dpa::data::{write_synthetic, Split, SynthSpec};

fn main() -> dpa::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic-textures".into());
    let spec = SynthSpec {
        n_train: 200,
        n_test_normal: 50,
        n_test_anomalous: 50,
        n_val_pool: 40,
        ..SynthSpec::default()
    };
    let manifest = write_synthetic(out.as_ref(), &spec)?;
    for split in [Split::Train, Split::ValPool, Split::Test] {
        println!("{split:>9}: {} images", manifest.count(split));
    }
    println!("manifest written to {out}/manifest.csv");
    Ok(())
}

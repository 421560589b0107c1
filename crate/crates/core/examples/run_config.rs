//! Build a run configuration from text plus command-line style overrides.

use dpa::config::RunConfig;

fn main() -> dpa::Result<()> {
    let text = "\
# a small model for quick experiments
model.target_resolution = 64
model.bottleneck_dim = 32
train.steps_per_level = 500
loss.stage_offset = 1
search.bottleneck_dims = 16, 32, 64
";
    let mut cfg = RunConfig::parse(text)?;
    cfg.apply_override("train.seed=7")?;
    cfg.validate()?;
    println!("top level {}, input {}", cfg.model.top_level(), cfg.preprocess_spec().label());
    println!("{} search configurations", cfg.search_space().configs().len());
    if let Err(e) = cfg.apply_override("model.depth=3") {
        println!("rejected: {e}");
    }
    print!("{}", cfg.to_text());
    Ok(())
}

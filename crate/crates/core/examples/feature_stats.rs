//! Compute per-channel feature statistics for every extractor stage and store them.

use dpa::data::{generate_synthetic, SynthSpec};
use dpa::features::{FeatureExtractor, FixedRandomSpec, StatsSet};

fn main() -> dpa::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        n_train: 128,
        n_test_normal: 0,
        n_test_anomalous: 0,
        n_val_pool: 0,
        ..SynthSpec::default()
    })?;
    let images = ds.train_images()?;
    let ex = FeatureExtractor::<f32>::fixed_random(&FixedRandomSpec::default())?;
    let mut set = StatsSet::default();
    for stage in 0..ex.n_stages() {
        let st = ex.compute_stats(images.iter(), stage, "synthetic train normals")?;
        let mean_sigma = st.sigma.iter().sum::<f64>() / st.sigma.len() as f64;
        println!(
            "stage {stage}: {} channels at 1/{} resolution, mean sigma {mean_sigma:.4}",
            st.channels(),
            ex.stage(stage)?.downsample
        );
        set.insert(st);
    }
    let path = std::env::temp_dir().join("dpa-feature-stats.json");
    set.save(&path)?;
    let back = StatsSet::load(&path)?;
    assert_eq!(back, set);
    println!("saved to {}", path.display());
    Ok(())
}

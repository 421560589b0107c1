//! How selection quality depends on the number and variety of validation anomalies.

use dpa::autoencoder::ModelConfig;
use dpa::data::{generate_synthetic, PreprocessSpec, SynthSpec};
use dpa::hparam::{sensitivity_sweep, SearchSettings, SearchSpace, SweepSpec};
use dpa::TrainConfig;

fn main() -> dpa::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        n_train: 300,
        n_test_normal: 100,
        n_test_anomalous: 100,
        n_val_pool: 40,
        ..SynthSpec::default()
    })?;
    let budget = TrainConfig {
        steps_per_level: 40,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let settings = SearchSettings {
        model: ModelConfig {
            max_channels: 16,
            blocks_per_level: 1,
            ..ModelConfig::default()
        },
        trial_train: budget.clone(),
        final_train: budget,
        ..SearchSettings::default()
    };
    let space = SearchSpace {
        bottleneck_dims: vec![4, 16],
        stage_offsets: vec![0, 1],
        preprocess: vec![PreprocessSpec::default()],
    };
    let report = sensitivity_sweep(&space, &ds.samples, &settings, &SweepSpec::default())?;
    print!("{}", report.to_csv()?);
    Ok(())
}

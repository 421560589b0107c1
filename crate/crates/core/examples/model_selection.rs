//! Pick a bottleneck size and feature stage with 3-fold cross-validation and
//! twenty labelled anomalies of a single type.

use dpa::autoencoder::ModelConfig;
use dpa::data::{generate_synthetic, PreprocessSpec, Sample, Split, SynthSpec};
use dpa::hparam::{build_validation_set, cross_validate, SearchSettings, SearchSpace, ValidationSpec};
use dpa::TrainConfig;

fn main() -> dpa::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        n_train: 300,
        n_test_normal: 0,
        n_test_anomalous: 0,
        n_val_pool: 60,
        ..SynthSpec::default()
    })?;
    let pool: Vec<&Sample> = ds.split(Split::ValPool).collect();
    let ids = build_validation_set(
        pool.iter().copied(),
        &ValidationSpec {
            n_anomaly_types: 1,
            n_examples: 20,
            seed: 3,
        },
    )?;
    let validation: Vec<&Sample> = ids.iter().filter_map(|id| ds.get(id)).collect();
    println!("validation type: {}", validation[0].anomaly_type.as_deref().unwrap_or("?"));

    let normals: Vec<&Sample> = ds.split(Split::Train).collect();
    let space = SearchSpace {
        bottleneck_dims: vec![4, 16],
        stage_offsets: vec![0, 1],
        preprocess: vec![PreprocessSpec::default()],
    };
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
    let report = cross_validate(&space, &normals, &validation, &settings, None)?;
    for t in &report.trials {
        println!("{:<18} folds {:.3?} mean {:.4}", t.config.label(), t.fold_aucs, t.mean_auc.unwrap_or(f64::NAN));
    }
    if let Some(w) = &report.winner {
        println!("winner {} (mean CV AUC {:.4})", w.label(), report.winner_mean_auc.unwrap_or(f64::NAN));
    }
    Ok(())
}

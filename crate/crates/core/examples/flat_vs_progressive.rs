//! Same architecture and step budget, trained with and without progressive growing.

use dpa::data::{generate_synthetic, Split, SynthSpec};
use dpa::eval::{evaluate, Detector};
use dpa::features::{FeatureExtractor, FixedRandomSpec};
use dpa::{train, train_flat, LossConfig, ModelConfig, TrainConfig};

fn main() -> dpa::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        n_train: 600,
        n_test_normal: 100,
        n_test_anomalous: 100,
        n_val_pool: 0,
        ..SynthSpec::default()
    })?;
    let images = ds.train_images()?;
    let model = ModelConfig {
        max_channels: 16,
        blocks_per_level: 1,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        steps_per_level: 100,
        batch_size: 16,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        stage_offset: 1,
        ..LossConfig::default()
    };
    let ex = FeatureExtractor::<f32>::fixed_random(&FixedRandomSpec::default())?;
    for (name, t) in [
        ("progressive", train(&images, &model, &tc, &loss, Some(&ex))?),
        ("flat", train_flat(&images, &model, &tc, &loss, Some(&ex))?),
    ] {
        let d = Detector {
            model: &t.model,
            extractor: Some(&ex),
            stats: &t.stats,
            loss: &loss,
        };
        let (report, _) = evaluate(&d, ds.split(Split::Test))?;
        println!("{name:>11}: {} steps, test ROC AUC {:.4}", t.report.total_steps, report.roc_auc);
    }
    Ok(())
}

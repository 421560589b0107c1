//! Score a test split, compute ROC AUC and write the scores and ROC curve as CSV.

use dpa::data::{generate_synthetic, Split, SynthSpec};
use dpa::eval::{evaluate, write_roc_csv, write_scores_csv, Detector};
use dpa::features::{FeatureExtractor, FixedRandomSpec};
use dpa::{train, LossConfig, ModelConfig, TrainConfig};

fn main() -> dpa::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        n_train: 400,
        n_test_normal: 100,
        n_test_anomalous: 100,
        n_val_pool: 0,
        ..SynthSpec::default()
    })?;
    let model = ModelConfig {
        max_channels: 16,
        blocks_per_level: 1,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        steps_per_level: 80,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        stage_offset: 1,
        ..LossConfig::default()
    };
    let ex = FeatureExtractor::<f32>::fixed_random(&FixedRandomSpec::default())?;
    let t = train(&ds.train_images()?, &model, &tc, &loss, Some(&ex))?;

    let d = Detector {
        model: &t.model,
        extractor: Some(&ex),
        stats: &t.stats,
        loss: &loss,
    };
    let (report, scored) = evaluate(&d, ds.split(Split::Test))?;
    println!("ROC AUC {:.4}", report.roc_auc);
    println!(
        "normal scores    mean {:.4} sd {:.4}\nanomalous scores mean {:.4} sd {:.4}",
        report.normal_scores.mean, report.normal_scores.std, report.anomalous_scores.mean, report.anomalous_scores.std
    );
    let dir = std::env::temp_dir();
    write_scores_csv(&dir.join("dpa-scores.csv"), &scored)?;
    write_roc_csv(&dir.join("dpa-roc.csv"), &report.roc)?;
    println!("wrote dpa-scores.csv and dpa-roc.csv to {}", dir.display());
    Ok(())
}

//! Train an autoencoder with progressive growing and follow its schedule.

use dpa::data::{generate_synthetic, SynthSpec};
use dpa::features::{FeatureExtractor, FixedRandomSpec};
use dpa::{train, LossConfig, ModelConfig, TrainConfig};

fn main() -> dpa::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        n_train: 500,
        n_test_normal: 0,
        n_test_anomalous: 0,
        n_val_pool: 0,
        ..SynthSpec::default()
    })?;
    let model = ModelConfig {
        max_channels: 16,
        blocks_per_level: 1,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        steps_per_level: 100,
        batch_size: 16,
        eval_every: 25,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        stage_offset: 1,
        ..LossConfig::default()
    };
    let ex = FeatureExtractor::<f32>::fixed_random(&FixedRandomSpec::default())?;
    let t = train(&ds.train_images()?, &model, &tc, &loss, Some(&ex))?;
    let r = &t.report;
    println!("run {} trained {} steps, {} growth events", r.run_id, r.total_steps, r.growth_events);
    for e in &r.holdout {
        println!(
            "step {:>4}  level {}  alpha {:.2}  holdout loss {:.4}{}",
            e.step,
            e.level,
            e.alpha,
            e.loss,
            if e.eligible { "" } else { "  (fading)" }
        );
    }
    if let (Some(loss), Some(step)) = (r.best_holdout_loss, r.best_step) {
        println!("best holdout loss {loss:.4} at step {step}");
    }
    Ok(())
}

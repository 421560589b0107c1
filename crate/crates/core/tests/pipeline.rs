use dpa::autoencoder::{Autoencoder, ModelConfig};
use dpa::data::{generate_synthetic, Dataset, PreprocessSpec, Sample, Split, SynthSpec};
use dpa::eval::{evaluate, roc_auc_scores, Detector};
use dpa::features::{FeatureExtractor, FixedRandomSpec};
use dpa::hparam::{cross_validate, sensitivity_sweep, SearchSettings, SearchSpace, SweepSpec};
use dpa::loss::LossConfig;
use dpa::train::{train, TrainConfig, TrainMode};

fn model() -> ModelConfig {
    ModelConfig {
        base_resolution: 8,
        target_resolution: 16,
        bottleneck_dim: 8,
        base_channels: 4,
        max_channels: 8,
        input_channels: 1,
        blocks_per_level: 1,
    }
}

fn budget(steps: usize) -> TrainConfig {
    TrainConfig {
        steps_per_level: steps,
        batch_size: 8,
        eval_every: 20,
        ..TrainConfig::default()
    }
}

fn small_data(subtlety: f64) -> Dataset {
    generate_synthetic(&SynthSpec {
        seed: 21,
        resolution: 16,
        n_train: 150,
        n_test_normal: 60,
        n_test_anomalous: 60,
        n_val_pool: 24,
        subtlety,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn loss() -> LossConfig {
    LossConfig {
        stage_offset: 1,
        ..LossConfig::default()
    }
}

#[test]
fn anomalies_score_higher_on_average() {
    let ds = small_data(1.0);
    let ex = FeatureExtractor::<f32>::fixed_random(&FixedRandomSpec::default()).unwrap();
    let t = train(&ds.train_images().unwrap(), &model(), &budget(80), &loss(), Some(&ex)).unwrap();
    let d = Detector {
        model: &t.model,
        extractor: Some(&ex),
        stats: &t.stats,
        loss: &loss(),
    };
    let (report, scored) = evaluate(&d, ds.split(Split::Test)).unwrap();
    assert!(report.anomalous_scores.mean > report.normal_scores.mean, "{report:?}");
    assert_eq!(scored.len(), 120);

    // A reloaded checkpoint scores bitwise identically.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dpa");
    t.model.save_checkpoint(&path).unwrap();
    let back = Autoencoder::<f32>::load_checkpoint(&path).unwrap();
    let d2 = Detector { model: &back, ..d };
    let again = d2.score_samples(ds.split(Split::Test)).unwrap();
    assert_eq!(again, scored);
}

#[test]
fn zero_subtlety_is_chance_for_a_pixel_detector() {
    let ds = small_data(0.0);
    let train: Vec<&Sample> = ds.split(Split::Train).collect();
    let test: Vec<&Sample> = ds.split(Split::Test).collect();
    let scores: Vec<f64> = test
        .iter()
        .map(|t| {
            train
                .iter()
                .map(|s| {
                    s.image
                        .data()
                        .iter()
                        .zip(t.image.data())
                        .map(|(a, b)| (a - b).abs() as f64)
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let labels: Vec<bool> = test.iter().map(|s| s.is_anomalous()).collect();
    let auc = roc_auc_scores(&scores, &labels).unwrap();
    assert!((auc - 0.5).abs() < 0.15, "auc {auc}");
}

fn settings() -> SearchSettings {
    SearchSettings {
        model: model(),
        trial_train: budget(15),
        final_train: budget(15),
        loss: LossConfig::default(),
        extractor: FixedRandomSpec::default(),
        mode: TrainMode::Progressive,
        k_folds: 3,
        seed: 4,
    }
}

fn space(dims: Vec<usize>) -> SearchSpace {
    SearchSpace {
        bottleneck_dims: dims,
        stage_offsets: vec![0],
        preprocess: vec![PreprocessSpec {
            resolution: 16,
            ..PreprocessSpec::default()
        }],
    }
}

#[test]
fn singleton_space_wins_with_three_fold_aucs() {
    let ds = small_data(1.0);
    let normals: Vec<&Sample> = ds.split(Split::Train).collect();
    let validation: Vec<&Sample> = ds.split(Split::ValPool).take(10).collect();
    let report = cross_validate(&space(vec![8]), &normals, &validation, &settings(), None).unwrap();
    assert_eq!(report.trials.len(), 1);
    assert_eq!(report.trials[0].fold_aucs.len(), 3);
    assert_eq!(report.winner.as_ref().unwrap().bottleneck_dim, 8);
}

#[test]
fn search_resumes_from_its_log() {
    let ds = small_data(1.0);
    let normals: Vec<&Sample> = ds.split(Split::Train).collect();
    let validation: Vec<&Sample> = ds.split(Split::ValPool).take(10).collect();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trials.jsonl");
    let full = cross_validate(&space(vec![4, 8]), &normals, &validation, &settings(), Some(&log)).unwrap();
    // Drop the last trial as if the run had been interrupted.
    let text = std::fs::read_to_string(&log).unwrap();
    let kept: Vec<&str> = text.lines().take(2).collect();
    std::fs::write(&log, kept.join("\n") + "\n").unwrap();
    let resumed = cross_validate(&space(vec![4, 8]), &normals, &validation, &settings(), Some(&log)).unwrap();
    assert_eq!(full, resumed);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
}

#[test]
fn single_repeat_sweep_reports_zero_std() {
    let ds = small_data(1.0);
    let sweep = SweepSpec {
        n_types: vec![1],
        n_examples: vec![4],
        repeats: 1,
        seed: 0,
    };
    let report = sensitivity_sweep(&space(vec![4, 8]), &ds.samples, &settings(), &sweep).unwrap();
    assert_eq!(report.cells.len(), 1);
    assert_eq!(report.cells[0].std_test_auc, 0.0);
    assert!(report.max_test_auc >= report.min_test_auc);
    assert_eq!(report.reference.len(), 2);
}

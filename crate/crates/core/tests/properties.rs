use dpa::autoencoder::BlendState;
use dpa::data::{preprocess, Label, Manifest, ManifestRow, PreprocessSpec, Sample, Split};
use dpa::eval::roc_auc_scores;
use dpa::features::{FeatureExtractor, FeatureStats, FixedRandomSpec};
use dpa::hparam::{build_validation_set, fold_split, rank, Trial, TrialConfig, ValidationSpec};
use dpa::loss::{blended_loss, relative_l1, relative_perceptual_l1, LossConfig};
use dpa::tape::Tape;
use dpa::tensor::Tensor;
use dpa::train::holdout_split;
use proptest::prelude::*;
use std::path::PathBuf;

fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut w, mut n) = (0.0, 0.0);
    for (a, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (b, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            n += 1.0;
            w += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    w / n
}

fn both_classes() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60)
        .prop_flat_map(|n| (prop::collection::vec(0u8..6, n), prop::collection::vec(any::<bool>(), n)))
        .prop_map(|(s, mut l)| {
            l[0] = true;
            l[1] = false;
            (s.into_iter().map(|v| v as f64 / 5.0).collect(), l)
        })
}

fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), values).unwrap()
}

fn image_strategy(res: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0.0f64..1.0, res * res).prop_map(move |v| tensor(&[1, res, res], v))
}

fn stats(stage: usize, res: usize, channels: usize) -> FeatureStats {
    FeatureStats {
        stage,
        resolution: res,
        mu: (0..channels).map(|c| 0.05 * c as f64).collect(),
        sigma: (0..channels).map(|c| 0.5 + 0.1 * c as f64).collect(),
        source: "test".into(),
    }
}

fn tiny() -> FeatureExtractor<f64> {
    FeatureExtractor::fixed_random(&FixedRandomSpec {
        seed: 3,
        in_channels: 1,
        channels: vec![3, 5],
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_matches_pairwise_oracle((s, l) in both_classes()) {
        let fast = roc_auc_scores(&s, &l).unwrap();
        prop_assert!((fast - pairwise(&s, &l)).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_rank_invariant((s, l) in both_classes(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let t: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        prop_assert_eq!(roc_auc_scores(&s, &l).unwrap(), roc_auc_scores(&t, &l).unwrap());
    }

    #[test]
    fn swapping_labels_complements_auc((s, l) in both_classes()) {
        let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
        let sum = roc_auc_scores(&s, &l).unwrap() + roc_auc_scores(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn relative_l1_is_scale_invariant(
        v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8192..10000),
        c in 0.5f64..4.0,
    ) {
        let n = v.len();
        let fx = tensor(&[n], v.iter().map(|p| p.0).collect());
        let fr = tensor(&[n], v.iter().map(|p| p.1).collect());
        prop_assume!(fx.abs_sum() > 4000.0);
        let a = relative_l1(&fx, &fr, 1e-6).unwrap();
        let b = relative_l1(&fx.map(|x| x * c), &fr.map(|x| x * c), 1e-6).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn identity_loss_is_zero_and_others_nonnegative(x in image_strategy(8), r in image_strategy(8)) {
        let ex = tiny();
        for stage in 0..2 {
            let st = stats(stage, 8, ex.stage(stage).unwrap().channels);
            prop_assert_eq!(relative_perceptual_l1(&x, &x, &ex, &st, stage).unwrap().value(), 0.0);
            prop_assert!(relative_perceptual_l1(&x, &r, &ex, &st, stage).unwrap().value() >= 0.0);
        }
    }

    #[test]
    fn blended_loss_is_affine_in_alpha(
        x in image_strategy(8),
        r in image_strategy(8),
        a in 0.0f64..0.3, b in 0.35f64..0.65, c in 0.7f64..1.0,
    ) {
        let ex = tiny();
        let (lo, hi) = (stats(0, 4, 3), stats(1, 8, 5));
        let cfg = LossConfig::default();
        let at = |t: f64| blended_loss(&x, &r, BlendState::new(1, t).unwrap(), &ex, Some(&lo), &hi, &cfg).unwrap().value();
        let (la, lb, lc) = (at(a), at(b), at(c));
        prop_assert!((la + (lc - la) * (b - a) / (c - a) - lb).abs() <= 1e-12);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences(x in image_strategy(8), r in image_strategy(8)) {
        let ex = tiny();
        let st = stats(1, 8, 5);
        let mut tape = Tape::new();
        let t = tape.constant(x.clone().reshape(&[1, 1, 8, 8]).unwrap());
        let p = tape.variable(r.clone().reshape(&[1, 1, 8, 8]).unwrap());
        let l = dpa::loss::perceptual_on_tape(&mut tape, &ex, &st, t, p, 1e-6).unwrap();
        let g = tape.backward(l).get(p).unwrap().data().to_vec();
        let h = 1e-6;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..64 {
            let mut up = r.data().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let f = |v: Vec<f64>| relative_perceptual_l1(&x, &tensor(&[1, 8, 8], v), &ex, &st, 1).unwrap().value();
            let fd = (f(up) - f(dn)) / (2.0 * h);
            diff += (g[i] - fd).powi(2);
            norm += fd * fd;
        }
        prop_assert!(diff.sqrt() <= 1e-6 * norm.sqrt().max(1e-9));
    }

    #[test]
    fn stats_ignore_image_order(seed in 0u64..1000, n in 2usize..8) {
        let ex = FeatureExtractor::<f32>::fixed_random(&FixedRandomSpec::default()).unwrap();
        let images: Vec<Tensor<f32>> = (0..n)
            .map(|i| {
                let v = (0..256).map(|j| (((seed as usize + i * 31 + j * 7) % 97) as f32) / 97.0).collect();
                Tensor::new(vec![1, 16, 16], v).unwrap()
            })
            .collect();
        let a = ex.compute_stats(images.iter(), 1, "a").unwrap();
        let b = ex.compute_stats(images.iter().rev(), 1, "a").unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu).chain(a.sigma.iter().zip(&b.sigma)) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn holdout_and_folds_partition(n in 3usize..200, frac in 0.05f64..0.5, k in 2usize..4, seed in any::<u64>()) {
        let (train, hold) = holdout_split(n, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&hold).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!hold.is_empty());
        if n >= k {
            let folds = fold_split(n, k, seed).unwrap();
            let mut all: Vec<usize> = folds.concat();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn validation_sets_are_drawn_from_the_pool(types in 1usize..3, examples in 1usize..12, seed in any::<u64>()) {
        // The pool holds 10 examples of each type.
        prop_assume!(examples >= types && examples <= 10 * types);
        let pool: Vec<Sample> = (0..30)
            .map(|i| Sample {
                id: format!("p{i}"),
                label: Label::Anomalous,
                split: Split::ValPool,
                anomaly_type: Some(["a", "b", "c"][i % 3].into()),
                image: Tensor::zeros(&[1, 1, 1]),
            })
            .collect();
        let spec = ValidationSpec { n_anomaly_types: types, n_examples: examples, seed };
        let ids = build_validation_set(pool.iter(), &spec).unwrap();
        prop_assert_eq!(ids.len(), examples);
        let mut kinds: Vec<&str> = ids
            .iter()
            .map(|id| pool.iter().find(|s| &s.id == id).unwrap().anomaly_type.as_deref().unwrap())
            .collect();
        kinds.sort();
        kinds.dedup();
        prop_assert_eq!(kinds.len(), types);
        prop_assert_eq!(build_validation_set(pool.iter(), &spec).unwrap(), ids);
    }

    #[test]
    fn winner_has_the_best_mean(aucs in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..6)) {
        let trials: Vec<Trial> = aucs
            .iter()
            .enumerate()
            .map(|(i, a)| Trial {
                config: TrialConfig { bottleneck_dim: i + 1, stage_offset: 0, preprocess: PreprocessSpec::default() },
                fold_aucs: a.map(|v| vec![v; 3]).unwrap_or_default(),
                mean_auc: *a,
                failed: a.is_none().then(|| "boom".to_string()),
            })
            .collect();
        let report = rank(3, vec![], trials);
        match report.winner_mean_auc {
            Some(best) => prop_assert!(aucs.iter().flatten().all(|a| *a <= best)),
            None => prop_assert!(aucs.iter().all(Option::is_none)),
        }
    }

    #[test]
    fn manifest_csv_round_trips(n in 1usize..20) {
        let rows: Vec<ManifestRow> = (0..n)
            .map(|i| {
                let anomalous = i % 3 == 2;
                ManifestRow {
                    path: format!("img/{i}.png"),
                    label: if anomalous { Label::Anomalous } else { Label::Normal },
                    split: if anomalous { Split::Test } else if i % 2 == 0 { Split::Train } else { Split::Test },
                    anomaly_type: anomalous.then(|| "patch-shift".to_string()),
                }
            })
            .collect();
        let m = Manifest { root: PathBuf::from("/data"), rows };
        let back = Manifest::parse(&m.to_csv().unwrap(), PathBuf::from("/data")).unwrap();
        prop_assert_eq!(back.rows, m.rows);
    }

    #[test]
    fn disabled_preprocessing_steps_are_no_ops(v in prop::collection::vec(0u8..=255, 16 * 16)) {
        let img = Tensor::new(vec![1, 16, 16], v.iter().map(|&b| b as f32 / 255.0).collect()).unwrap();
        let spec = PreprocessSpec { resolution: 16, grayscale: false, center_crop: false, hist_equalize: false };
        prop_assert_eq!(&preprocess(&img, &spec).unwrap(), &img);
        let gray = PreprocessSpec { grayscale: true, ..spec };
        prop_assert_eq!(&preprocess(&img, &gray).unwrap(), &img);
    }
}

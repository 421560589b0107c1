//! Weakly-supervised model selection.
//!
//! A validation set holds a few labelled anomalies drawn from a confined
//! number of anomaly types. Every configuration of a small grid is trained on
//! `k` folds of the normal data; each fold model scores its held-out normals
//! together with the (shared) validation anomalies, and configurations are
//! ranked by mean fold ROC AUC.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::ModelConfig;
use crate::data::{PreprocessSpec, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{mean_std, roc_auc_scores, Detector};
use crate::features::{FeatureExtractor, FixedRandomSpec};
use crate::loss::LossConfig;
use crate::tensor::ImageTensor;
use crate::train::{fit, TrainConfig, TrainMode, TrainSetup, Trained};

pub const SEARCH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSpec {
    pub n_anomaly_types: usize,
    pub n_examples: usize,
    pub seed: u64,
}

/// Pick `n_anomaly_types` types uniformly at random, then `n_examples` ids
/// spread over them as evenly as possible. Returns ids only.
pub fn build_validation_set<'a>(pool: impl IntoIterator<Item = &'a Sample>, spec: &ValidationSpec) -> Result<Vec<String>> {
    if spec.n_anomaly_types == 0 || spec.n_examples == 0 {
        return Err(Error::invalid("validation set needs at least one type and one example"));
    }
    if spec.n_examples < spec.n_anomaly_types {
        return Err(Error::invalid(format!(
            "{} examples cannot cover {} anomaly types",
            spec.n_examples, spec.n_anomaly_types
        )));
    }
    let mut by_type: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in pool {
        if !s.is_anomalous() {
            continue;
        }
        let t = s.anomaly_type.clone().unwrap_or_default();
        by_type.entry(t).or_default().push(s.id.clone());
    }
    if by_type.len() < spec.n_anomaly_types {
        return Err(Error::InsufficientPool(format!(
            "pool has {} anomaly types, {} requested",
            by_type.len(),
            spec.n_anomaly_types
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut types: Vec<&String> = by_type.keys().collect();
    types.shuffle(&mut rng);
    types.truncate(spec.n_anomaly_types);
    let base = spec.n_examples / spec.n_anomaly_types;
    let extra = spec.n_examples % spec.n_anomaly_types;
    let mut out = Vec::with_capacity(spec.n_examples);
    for (i, t) in types.iter().enumerate() {
        let want = base + usize::from(i < extra);
        let mut ids = by_type[*t].clone();
        ids.sort();
        if ids.len() < want {
            return Err(Error::InsufficientPool(format!(
                "type `{t}` has {} examples, {want} requested",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        out.extend(ids.into_iter().take(want));
    }
    Ok(out)
}

/// Fails if the two id sets share any element.
pub fn check_disjoint<'a>(
    what: &str,
    a: impl IntoIterator<Item = &'a String>,
    b: impl IntoIterator<Item = &'a String>,
) -> Result<()> {
    let a: HashSet<&String> = a.into_iter().collect();
    if let Some(id) = b.into_iter().find(|id| a.contains(id)) {
        return Err(Error::invalid(format!("leakage: `{id}` appears in both {what}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialConfig {
    pub bottleneck_dim: usize,
    /// Offset of the level-to-stage mapping; the final level uses stage `top + offset` (clamped).
    pub stage_offset: usize,
    pub preprocess: PreprocessSpec,
}

impl TrialConfig {
    /// Tie-break order: smaller bottleneck, then shallower stage, then preprocessing label.
    pub fn order_key(&self) -> (usize, usize, String) {
        (self.bottleneck_dim, self.stage_offset, self.preprocess.label())
    }

    pub fn label(&self) -> String {
        format!("z{}-s{}-{}", self.bottleneck_dim, self.stage_offset, self.preprocess.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub bottleneck_dims: Vec<usize>,
    pub stage_offsets: Vec<usize>,
    pub preprocess: Vec<PreprocessSpec>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_dims.is_empty() || self.stage_offsets.is_empty() || self.preprocess.is_empty() {
            return Err(Error::invalid("every search-space axis needs at least one candidate"));
        }
        if self.bottleneck_dims.contains(&0) {
            return Err(Error::invalid("bottleneck candidates must be >= 1"));
        }
        Ok(())
    }

    /// Every combination, in tie-break order.
    pub fn configs(&self) -> Vec<TrialConfig> {
        let mut v = Vec::new();
        for &b in &self.bottleneck_dims {
            for &s in &self.stage_offsets {
                for p in &self.preprocess {
                    v.push(TrialConfig {
                        bottleneck_dim: b,
                        stage_offset: s,
                        preprocess: p.clone(),
                    });
                }
            }
        }
        v.sort_by_key(|c| c.order_key());
        v.dedup();
        v
    }
}

/// Fixed parts of every trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    /// Base model; bottleneck, target resolution and input channels come from the trial.
    pub model: ModelConfig,
    /// Budget for fold models.
    pub trial_train: TrainConfig,
    /// Budget for models fitted on all normals.
    pub final_train: TrainConfig,
    /// Base loss; the stage offset comes from the trial.
    pub loss: LossConfig,
    /// Base extractor; input channels come from the preprocessed data.
    pub extractor: FixedRandomSpec,
    pub mode: TrainMode,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            trial_train: TrainConfig {
                steps_per_level: 500,
                ..Default::default()
            },
            final_train: TrainConfig::default(),
            loss: LossConfig::default(),
            extractor: FixedRandomSpec::default(),
            mode: TrainMode::Progressive,
            k_folds: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: TrialConfig,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: Option<f64>,
    /// Why the trial was excluded, if it was.
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub format_version: u32,
    pub k_folds: usize,
    pub validation_ids: Vec<String>,
    pub trials: Vec<Trial>,
    pub winner: Option<TrialConfig>,
    pub winner_mean_auc: Option<f64>,
    pub tie_break: Option<String>,
}

/// Scores of one fold model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub normal: Vec<f64>,
    /// Aligned with the anomaly list the scores were computed for.
    pub anomalous: Vec<f64>,
}

/// Held-out index sets of a seeded `k`-fold split of `0..n`.
pub fn fold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::invalid(format!("cannot split {n} normals into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    idx.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, j) in idx.into_iter().enumerate() {
        folds[i % k].push(j);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Configurations resolved for one trial.
pub struct Resolved {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub extractor: FeatureExtractor<f32>,
}

fn channels_of(images: &[ImageTensor]) -> Result<usize> {
    let c = images
        .first()
        .ok_or_else(|| Error::EmptyDataset("no images to infer channels from".into()))?
        .shape()[0];
    if images.iter().any(|i| i.shape()[0] != c) {
        return Err(Error::Shape("images have differing channel counts; enable grayscale".into()));
    }
    Ok(c)
}

pub fn resolve(cfg: &TrialConfig, settings: &SearchSettings, channels: usize) -> Result<Resolved> {
    let model = ModelConfig {
        bottleneck_dim: cfg.bottleneck_dim,
        target_resolution: cfg.preprocess.resolution,
        input_channels: channels,
        ..settings.model.clone()
    };
    model.validate()?;
    let loss = LossConfig {
        stage_offset: cfg.stage_offset,
        ..settings.loss.clone()
    };
    let extractor = FeatureExtractor::fixed_random(&FixedRandomSpec {
        in_channels: channels,
        ..settings.extractor.clone()
    })?;
    Ok(Resolved { model, loss, extractor })
}

fn fit_resolved(r: &Resolved, normals: &[ImageTensor], tc: &TrainConfig, mode: TrainMode) -> Result<Trained> {
    let setup = TrainSetup {
        model: &r.model,
        train: tc,
        loss: &r.loss,
        extractor: Some(&r.extractor),
        stats: None,
    };
    Ok(fit(normals, &setup, mode, &mut ())?)
}

fn score(r: &Resolved, trained: &Trained, images: &[&ImageTensor]) -> Result<Vec<f64>> {
    let d = Detector {
        model: &trained.model,
        extractor: Some(&r.extractor),
        stats: &trained.stats,
        loss: &r.loss,
    };
    d.score_images(images)
}

/// Preprocessed copies of a sample list, cached per preprocessing spec.
#[derive(Default)]
pub struct PreprocessCache {
    map: HashMap<(PreprocessSpec, usize), Vec<ImageTensor>>,
}

impl PreprocessCache {
    /// `slot` distinguishes different sample lists under the same spec.
    pub fn get(&mut self, spec: &PreprocessSpec, slot: usize, samples: &[&Sample]) -> Result<&[ImageTensor]> {
        let key = (spec.clone(), slot);
        if !self.map.contains_key(&key) {
            let v = samples
                .iter()
                .map(|s| crate::data::preprocess(&s.image, spec))
                .collect::<Result<Vec<_>>>()?;
            self.map.insert(key.clone(), v);
        }
        Ok(&self.map[&key])
    }
}

/// Train the `k` fold models of one configuration and score each fold's
/// held-out normals and every sample of `anomalies`.
pub fn score_folds(
    cfg: &TrialConfig,
    normals: &[&Sample],
    anomalies: &[&Sample],
    settings: &SearchSettings,
    cache: &mut PreprocessCache,
) -> Result<Vec<FoldScores>> {
    let folds = fold_split(normals.len(), settings.k_folds, settings.seed)?;
    let norm = cache.get(&cfg.preprocess, 0, normals)?.to_vec();
    let anom = cache.get(&cfg.preprocess, 1, anomalies)?.to_vec();
    let r = resolve(cfg, settings, channels_of(&norm)?)?;
    let anom_refs: Vec<&ImageTensor> = anom.iter().collect();
    let mut out = Vec::with_capacity(folds.len());
    for held in &folds {
        let held_set: HashSet<usize> = held.iter().copied().collect();
        let train: Vec<ImageTensor> = (0..norm.len())
            .filter(|i| !held_set.contains(i))
            .map(|i| norm[i].clone())
            .collect();
        let trained = fit_resolved(&r, &train, &settings.trial_train, settings.mode)?;
        let held_refs: Vec<&ImageTensor> = held.iter().map(|&i| &norm[i]).collect();
        out.push(FoldScores {
            normal: score(&r, &trained, &held_refs)?,
            anomalous: score(&r, &trained, &anom_refs)?,
        });
    }
    Ok(out)
}

/// Fold AUCs of one configuration, using the anomalies at `subset` positions.
pub fn fold_aucs(folds: &[FoldScores], subset: &[usize]) -> Result<Vec<f64>> {
    folds
        .iter()
        .map(|f| {
            let mut scores = f.normal.clone();
            let mut labels = vec![false; f.normal.len()];
            for &i in subset {
                scores.push(f.anomalous[i]);
                labels.push(true);
            }
            roc_auc_scores(&scores, &labels)
        })
        .collect()
}

fn trial_from(config: TrialConfig, aucs: Result<Vec<f64>>) -> Trial {
    match aucs {
        Ok(f) => Trial {
            config,
            mean_auc: Some(f.iter().sum::<f64>() / f.len() as f64),
            fold_aucs: f,
            failed: None,
        },
        Err(e) => Trial {
            config,
            fold_aucs: Vec::new(),
            mean_auc: None,
            failed: Some(e.to_string()),
        },
    }
}

/// Rank completed trials; failed ones are kept in the list but never win.
pub fn rank(k_folds: usize, validation_ids: Vec<String>, trials: Vec<Trial>) -> SearchReport {
    let best = trials
        .iter()
        .filter_map(|t| t.mean_auc)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut top: Vec<&Trial> = trials.iter().filter(|t| t.mean_auc == Some(best)).collect();
    top.sort_by_key(|t| t.config.order_key());
    let winner = top.first().map(|t| t.config.clone());
    let tie_break = (top.len() > 1).then(|| {
        format!(
            "{} trials tied at mean AUC {best}; chose {} by smallest bottleneck, then shallowest stage, then preprocessing label",
            top.len(),
            top[0].config.label()
        )
    });
    SearchReport {
        format_version: SEARCH_FORMAT_VERSION,
        k_folds,
        validation_ids,
        winner_mean_auc: winner.as_ref().map(|_| best),
        winner,
        trials,
        tie_break,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LogLine {
    Header { k_folds: usize, seed: u64, validation_ids: Vec<String> },
    Trial(Trial),
}

fn read_log(path: &Path, k_folds: usize, seed: u64, ids: &[String]) -> Result<Vec<Trial>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogLine>(&line) {
            Ok(LogLine::Header {
                k_folds: k,
                seed: s,
                validation_ids,
            }) => {
                if k != k_folds || s != seed || validation_ids != ids {
                    return Err(Error::invalid(format!(
                        "trials log {} belongs to a different search",
                        path.display()
                    )));
                }
            }
            Ok(LogLine::Trial(t)) => out.push(t),
            // A line cut short by an interruption is simply redone.
            Err(_) if i > 0 => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn append_log(path: &Path, line: &LogLine) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(line)?).map_err(|e| Error::io(path, e))
}

/// Grid search with `k`-fold cross-validation over the normals. Validation
/// anomalies are shared by every fold. With `log`, finished trials are
/// appended as JSON lines and skipped when the search is rerun.
pub fn cross_validate(
    space: &SearchSpace,
    normals: &[&Sample],
    validation: &[&Sample],
    settings: &SearchSettings,
    log: Option<&Path>,
) -> Result<SearchReport> {
    space.validate()?;
    if normals.iter().any(|s| s.is_anomalous()) {
        return Err(Error::invalid("cross-validation normals contain an anomalous sample"));
    }
    if validation.is_empty() || validation.iter().any(|s| !s.is_anomalous()) {
        return Err(Error::invalid("validation set must be non-empty and anomalous only"));
    }
    let ids: Vec<String> = validation.iter().map(|s| s.id.clone()).collect();
    check_disjoint("validation and training normals", &ids, normals.iter().map(|s| &s.id))?;
    let done = match log {
        Some(p) => {
            let d = read_log(p, settings.k_folds, settings.seed, &ids)?;
            if !p.exists() || std::fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true) {
                append_log(
                    p,
                    &LogLine::Header {
                        k_folds: settings.k_folds,
                        seed: settings.seed,
                        validation_ids: ids.clone(),
                    },
                )?;
            }
            d
        }
        None => Vec::new(),
    };
    let all: Vec<usize> = (0..validation.len()).collect();
    let mut cache = PreprocessCache::default();
    let mut trials = Vec::new();
    for cfg in space.configs() {
        if let Some(t) = done.iter().find(|t| t.config == cfg) {
            trials.push(t.clone());
            continue;
        }
        let aucs = score_folds(&cfg, normals, validation, settings, &mut cache).and_then(|f| fold_aucs(&f, &all));
        let t = trial_from(cfg, aucs);
        if let Some(p) = log {
            append_log(p, &LogLine::Trial(t.clone()))?;
        }
        trials.push(t);
    }
    Ok(rank(settings.k_folds, ids, trials))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub n_types: Vec<usize>,
    pub n_examples: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            n_types: vec![1, 2],
            n_examples: vec![2, 20],
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReference {
    pub config: TrialConfig,
    /// Test AUC of the configuration fitted on all normals; `None` if training failed.
    pub test_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub validation_ids: Vec<String>,
    pub winner: Option<TrialConfig>,
    pub winner_cv_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub tie_break: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_types: usize,
    pub n_examples: usize,
    pub runs: Vec<SweepRun>,
    pub mean_test_auc: f64,
    pub std_test_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format_version: u32,
    pub spec: SweepSpec,
    pub k_folds: usize,
    pub reference: Vec<GridReference>,
    pub max_test_auc: f64,
    pub min_test_auc: f64,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    /// Grid CSV: one row per `n_examples`, one column per `n_types`, cells `mean±std`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["n_examples".to_string()];
        header.extend(self.spec.n_types.iter().map(|t| format!("types_{t}")));
        w.write_record(&header)?;
        for &e in &self.spec.n_examples {
            let mut row = vec![e.to_string()];
            for &t in &self.spec.n_types {
                let cell = self.cells.iter().find(|c| c.n_types == t && c.n_examples == e);
                row.push(match cell {
                    Some(c) => format!("{:.4}±{:.4}", c.mean_test_auc, c.std_test_auc),
                    None => String::new(),
                });
            }
            w.write_record(&row)?;
        }
        let mut row = vec!["grid_max".to_string()];
        row.extend(self.spec.n_types.iter().map(|_| format!("{:.4}", self.max_test_auc)));
        w.write_record(&row)?;
        let mut row = vec!["grid_min".to_string()];
        row.extend(self.spec.n_types.iter().map(|_| format!("{:.4}", self.min_test_auc)));
        w.write_record(&row)?;
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }
}

fn cell_seed(seed: u64, t: usize, e: usize, r: usize) -> u64 {
    seed ^ ((t as u64) << 40) ^ ((e as u64) << 20) ^ (r as u64).wrapping_mul(0x9E37_79B9)
}

/// Test AUC of every grid configuration fitted on all normals with the final budget.
pub fn grid_reference(
    space: &SearchSpace,
    normals: &[&Sample],
    test: &[&Sample],
    settings: &SearchSettings,
    cache: &mut PreprocessCache,
) -> Result<Vec<GridReference>> {
    let mut out = Vec::new();
    for cfg in space.configs() {
        let auc = (|| -> Result<f64> {
            let norm = cache.get(&cfg.preprocess, 0, normals)?.to_vec();
            let test_imgs = cache.get(&cfg.preprocess, 2, test)?.to_vec();
            let r = resolve(&cfg, settings, channels_of(&norm)?)?;
            let trained = fit_resolved(&r, &norm, &settings.final_train, settings.mode)?;
            let refs: Vec<&ImageTensor> = test_imgs.iter().collect();
            let scores = score(&r, &trained, &refs)?;
            let labels: Vec<bool> = test.iter().map(|s| s.is_anomalous()).collect();
            roc_auc_scores(&scores, &labels)
        })();
        out.push(GridReference {
            config: cfg,
            test_auc: auc.ok(),
        });
    }
    Ok(out)
}

/// Sensitivity of selection quality to the validation set's size and variety.
///
/// Each cell resamples its validation set `repeats` times from the val-pool
/// split, reruns the cross-validated selection and reports the test AUC of
/// the winner fitted on all normals. Fold models do not depend on the
/// validation set, so their scores on the whole pool are computed once and
/// reused by every resample; likewise each configuration's all-normals fit
/// doubles as the exhaustive max/min reference.
pub fn sensitivity_sweep(
    space: &SearchSpace,
    samples: &[Sample],
    settings: &SearchSettings,
    sweep: &SweepSpec,
) -> Result<SweepReport> {
    space.validate()?;
    if sweep.repeats == 0 || sweep.n_types.is_empty() || sweep.n_examples.is_empty() {
        return Err(Error::invalid("sweep needs repeats >= 1 and non-empty axes"));
    }
    let normals: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let pool: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.split == Split::ValPool && s.is_anomalous())
        .collect();
    let test: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    let pool_ids: Vec<&String> = pool.iter().map(|s| &s.id).collect();
    check_disjoint("val-pool and test", pool_ids.iter().copied(), test.iter().map(|s| &s.id))?;
    check_disjoint("val-pool and train", pool_ids.iter().copied(), normals.iter().map(|s| &s.id))?;

    let mut cache = PreprocessCache::default();
    let configs = space.configs();
    let mut grid_scores = Vec::with_capacity(configs.len());
    for cfg in &configs {
        grid_scores.push(score_folds(cfg, &normals, &pool, settings, &mut cache));
    }
    let reference = grid_reference(space, &normals, &test, settings, &mut cache)?;
    let finite: Vec<f64> = reference.iter().filter_map(|r| r.test_auc).collect();
    if finite.is_empty() {
        return Err(Error::invalid("no grid configuration could be trained"));
    }
    let max_test_auc = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_test_auc = finite.iter().copied().fold(f64::INFINITY, f64::min);

    let position: HashMap<&String, usize> = pool_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut cells = Vec::new();
    for &t in &sweep.n_types {
        for &e in &sweep.n_examples {
            let mut runs = Vec::new();
            for r in 0..sweep.repeats {
                let vspec = ValidationSpec {
                    n_anomaly_types: t,
                    n_examples: e,
                    seed: cell_seed(sweep.seed, t, e, r),
                };
                let ids = build_validation_set(pool.iter().copied(), &vspec)?;
                check_disjoint("validation and test", &ids, test.iter().map(|s| &s.id))?;
                let subset: Vec<usize> = ids.iter().map(|id| position[id]).collect();
                let trials: Vec<Trial> = configs
                    .iter()
                    .zip(&grid_scores)
                    .map(|(cfg, sc)| {
                        let aucs = match sc {
                            Ok(f) => fold_aucs(f, &subset),
                            Err(err) => Err(Error::invalid(err.to_string())),
                        };
                        trial_from(cfg.clone(), aucs)
                    })
                    .collect();
                let rep = rank(settings.k_folds, ids, trials);
                let test_auc = rep
                    .winner
                    .as_ref()
                    .and_then(|w| reference.iter().find(|g| &g.config == w))
                    .and_then(|g| g.test_auc);
                runs.push(SweepRun {
                    validation_ids: rep.validation_ids,
                    winner: rep.winner,
                    winner_cv_auc: rep.winner_mean_auc,
                    test_auc,
                    tie_break: rep.tie_break,
                });
            }
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.test_auc).collect();
            let (mean, std) = if vals.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_std(&vals)
            };
            cells.push(SweepCell {
                n_types: t,
                n_examples: e,
                runs,
                mean_test_auc: mean,
                std_test_auc: std,
            });
        }
    }
    Ok(SweepReport {
        format_version: SEARCH_FORMAT_VERSION,
        spec: sweep.clone(),
        k_folds: settings.k_folds,
        reference,
        max_test_auc,
        min_test_auc,
        cells,
    })
}

//! Training loop over normal images: progressive growing with a linear fade-in
//! schedule, or a single flat level at the target resolution.
//!
//! A fraction of the normal images is held out and never used for gradient
//! steps. Holdout loss is recorded every `eval_every` steps and at the end of
//! each level; early stopping only considers evaluations taken at the final
//! level with the new layers fully faded in.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{blend_input, Autoencoder, BlendState, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, Provenance, StatsSet};
use crate::loss::{down, LossConfig, LossContext, LossKind};
use crate::optim::{Adam, AdamConfig};
use crate::tape::Tape;
use crate::tensor::{ImageTensor, Tensor};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps_per_level: usize,
    /// Portion of each level's budget spent fading the new layers in.
    pub fade_fraction: f64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    /// Eligible holdout evaluations without sufficient improvement before stopping.
    pub patience: usize,
    pub rel_improve_tol: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// Cap on training images used to compute feature statistics.
    pub stats_max_images: usize,
    /// Train on random 3/4-side crops resized back to the level resolution.
    pub random_crop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_per_level: 2000,
            fade_fraction: 0.5,
            optimizer: AdamConfig::default(),
            batch_size: 32,
            holdout_fraction: 0.1,
            patience: 5,
            rel_improve_tol: 1e-3,
            eval_every: 100,
            seed: 0,
            stats_max_images: 512,
            random_crop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.steps_per_level == 0 {
            return bad("steps_per_level must be >= 1");
        }
        if !(self.fade_fraction > 0.0 && self.fade_fraction <= 1.0) {
            return bad("fade_fraction must be in (0, 1]");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must be in (0, 1)");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 || self.stats_max_images == 0 {
            return bad("batch_size, eval_every, patience and stats_max_images must be >= 1");
        }
        if !(self.optimizer.lr > 0.0) || !(self.rel_improve_tol >= 0.0) {
            return bad("lr must be > 0 and rel_improve_tol >= 0");
        }
        Ok(())
    }
}

/// Blend state at `step` steps into `level`: `alpha = min(1, step / (fade_fraction * steps_per_level))`.
pub fn alpha_at(step: usize, level: usize, cfg: &TrainConfig) -> BlendState {
    if level == 0 {
        return BlendState::full(0);
    }
    let window = cfg.fade_fraction * cfg.steps_per_level as f64;
    BlendState {
        level,
        alpha: (step as f64 / window).min(1.0),
    }
}

/// Extractor stage used at `level`.
pub fn level_stage(level: usize, loss: &LossConfig, n_stages: usize) -> usize {
    loss.stage_for_level(level, n_stages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Progressive,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpan {
    pub level: usize,
    pub resolution: usize,
    pub start_step: usize,
    /// Exclusive.
    pub end_step: usize,
    pub stage: Option<usize>,
    pub fade_stage: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutEval {
    /// Global steps completed when the evaluation was taken.
    pub step: usize,
    pub level: usize,
    pub alpha: f64,
    pub loss: f64,
    /// Taken at the final level with `alpha = 1`, so it counts for early stopping.
    pub eligible: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub step: Vec<usize>,
    pub level: Vec<usize>,
    pub alpha: Vec<f64>,
    pub loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub extractor: Option<ExtractorEcho>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorEcho {
    pub provenance: Provenance,
    pub n_stages: usize,
    pub spec: Option<crate::features::FixedRandomSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub format_version: u32,
    pub run_id: String,
    pub mode: TrainMode,
    pub config: ConfigEcho,
    pub n_train: usize,
    pub n_holdout: usize,
    /// Positions (in the input dataset) of the held-out images.
    pub holdout_indices: Vec<usize>,
    pub trace: LossTrace,
    pub levels: Vec<LevelSpan>,
    pub holdout: Vec<HoldoutEval>,
    pub growth_events: usize,
    pub stopped_early: bool,
    pub total_steps: usize,
    pub best_step: Option<usize>,
    pub best_holdout_loss: Option<f64>,
    pub final_holdout_loss: Option<f64>,
    pub final_blend: BlendState,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A trained model, its report and the feature statistics it was trained and is scored with.
pub struct Trained {
    pub model: Autoencoder<f32>,
    pub report: TrainReport,
    pub stats: StatsSet,
}

/// A training error together with everything recorded up to the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub partial: Option<Box<TrainReport>>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainFailure {}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

/// Hooks into the training data path.
pub trait TrainObserver {
    /// Called with the dataset positions of every batch used for a gradient step.
    fn on_batch(&mut self, _level: usize, _indices: &[usize]) {}
    fn on_holdout_eval(&mut self, _eval: &HoldoutEval) {}
}

impl TrainObserver for () {}

/// Everything [`fit`] needs besides the data.
pub struct TrainSetup<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub extractor: Option<&'a FeatureExtractor<f32>>,
    /// Precomputed statistics; missing (stage, resolution) pairs are computed on the training split.
    pub stats: Option<&'a StatsSet>,
}

/// Progressive-growing training on normal images at the target resolution.
pub fn train(
    data: &[ImageTensor],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    extractor: Option<&FeatureExtractor<f32>>,
) -> std::result::Result<Trained, TrainFailure> {
    let setup = TrainSetup {
        model: model_cfg,
        train: train_cfg,
        loss: loss_cfg,
        extractor,
        stats: None,
    };
    fit(data, &setup, TrainMode::Progressive, &mut ())
}

/// Training without growth: every level present from the start, target resolution only.
pub fn train_flat(
    data: &[ImageTensor],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    extractor: Option<&FeatureExtractor<f32>>,
) -> std::result::Result<Trained, TrainFailure> {
    let setup = TrainSetup {
        model: model_cfg,
        train: train_cfg,
        loss: loss_cfg,
        extractor,
        stats: None,
    };
    fit(data, &setup, TrainMode::Flat, &mut ())
}

fn run_id(echo: &ConfigEcho, mode: TrainMode, data: &[ImageTensor]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(echo)?);
    h.update(serde_json::to_vec(&mode)?);
    h.update((data.len() as u64).to_le_bytes());
    for img in data {
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn check_data(data: &[ImageTensor], cfg: &ModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    let r = cfg.target_resolution;
    for img in data {
        let s = img.shape();
        if s.len() != 3 || s[0] != cfg.input_channels || s[1] != s[2] {
            return Err(Error::Shape(format!(
                "expected [{}, {r}, {r}] images, got {s:?}",
                cfg.input_channels
            )));
        }
        if s[1] != r {
            return Err(Error::Resolution {
                expected: r,
                actual: s[1],
            });
        }
    }
    Ok(())
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Shuffled split of `0..n` into (train, holdout); holdout gets `ceil(n * fraction)` images.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed, 3));
    let n_hold = ((n as f64 * fraction).ceil() as usize).max(1);
    if n_hold >= n {
        return Err(Error::EmptyDataset(format!("{n} images leave nothing to train on after the holdout split")));
    }
    let train = idx.split_off(n_hold);
    let mut hold = idx;
    hold.sort_unstable();
    Ok((train, hold))
}

/// Random crop of `3/4` of each side, resized back to the input size.
fn random_crop(img: &ImageTensor, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (h, w) = img.hw();
    let (ch, cw) = ((h * 3 / 4).max(1), (w * 3 / 4).max(1));
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let crop = crate::data::crop(img, y0, x0, ch, cw);
    crate::data::resize_bilinear(&crop, h, w)
}

struct Run<'a> {
    setup: &'a TrainSetup<'a>,
    mode: TrainMode,
    top: usize,
    pyramid: Vec<Vec<ImageTensor>>,
    train_idx: Vec<usize>,
    hold_idx: Vec<usize>,
    stats: StatsSet,
}

impl Run<'_> {
    fn n_stages(&self) -> usize {
        self.setup.extractor.map_or(1, |e| e.n_stages())
    }

    fn uses_features(&self) -> bool {
        self.setup.loss.kind == LossKind::Perceptual
    }

    fn stage(&self, level: usize) -> usize {
        level_stage(level, self.setup.loss, self.n_stages())
    }

    fn ctx(&self) -> LossContext<'_, f32> {
        LossContext {
            extractor: self.setup.extractor,
            stats: &self.stats,
            cfg: self.setup.loss,
        }
    }

    fn levels(&self) -> Vec<usize> {
        match self.mode {
            TrainMode::Progressive => (0..=self.top).collect(),
            TrainMode::Flat => vec![self.top],
        }
    }

    fn ensure_stats(&mut self, data: &[ImageTensor]) -> Result<()> {
        if !self.uses_features() {
            return Ok(());
        }
        let ex = self
            .setup
            .extractor
            .ok_or_else(|| Error::invalid("perceptual loss needs a feature extractor"))?;
        let cap = self.setup.train.stats_max_images.min(self.train_idx.len());
        let source = format!("train-normals:{}", run_id_short(data));
        for level in self.levels() {
            let stage = self.stage(level);
            let res = self.setup.model.resolution(level);
            if self.stats.contains(stage, res) {
                continue;
            }
            let imgs: Vec<&ImageTensor> = self.train_idx[..cap].iter().map(|&i| &self.pyramid[level][i]).collect();
            let st = ex.compute_stats(imgs, stage, &source)?;
            self.stats.insert(st);
        }
        Ok(())
    }

    fn batch_loss(&self, model: &Autoencoder<f32>, x: Tensor<f32>, blend: BlendState) -> Result<Vec<f64>> {
        let x = blend_input(&x, blend.alpha)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = model.forward_on_tape(&mut tape, xv, blend, false)?;
        let per = self.ctx().blended(&mut tape, xv, fwd.output, blend)?;
        Ok(tape.value(per).data().iter().map(|&v| v as f64).collect())
    }

    fn holdout_loss(&self, model: &Autoencoder<f32>, blend: BlendState) -> Result<f64> {
        let imgs = &self.pyramid[blend.level];
        let mut total = 0.0;
        for chunk in self.hold_idx.chunks(self.setup.train.batch_size.max(1)) {
            let refs: Vec<&ImageTensor> = chunk.iter().map(|&i| &imgs[i]).collect();
            total += self.batch_loss(model, Tensor::stack(&refs)?, blend)?.iter().sum::<f64>();
        }
        Ok(total / self.hold_idx.len() as f64)
    }
}

fn run_id_short(data: &[ImageTensor]) -> String {
    let mut h = Sha256::new();
    for img in data {
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().take(4).map(|b| format!("{b:02x}")).collect()
}

fn params_finite(p: &Params<f32>) -> bool {
    p.values().all(|t| t.all_finite())
}

/// Shared training loop behind [`train`] and [`train_flat`].
pub fn fit(
    data: &[ImageTensor],
    setup: &TrainSetup<'_>,
    mode: TrainMode,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<Trained, TrainFailure> {
    let tc = setup.train;
    setup.model.validate()?;
    tc.validate()?;
    setup.loss.validate()?;
    check_data(data, setup.model)?;
    if setup.loss.kind == LossKind::Perceptual {
        let ex = setup
            .extractor
            .ok_or_else(|| Error::invalid("perceptual loss needs a feature extractor"))?;
        if ex.in_channels() != setup.model.input_channels {
            return Err(Error::invalid(format!(
                "extractor expects {} input channels, model has {}",
                ex.in_channels(),
                setup.model.input_channels
            ))
            .into());
        }
    }

    let echo = ConfigEcho {
        model: setup.model.clone(),
        train: tc.clone(),
        loss: setup.loss.clone(),
        extractor: setup.extractor.map(|e| ExtractorEcho {
            provenance: e.provenance(),
            n_stages: e.n_stages(),
            spec: e.fixed_random_spec().cloned(),
        }),
    };
    let top = setup.model.top_level();
    let (train_idx, hold_idx) = holdout_split(data.len(), tc.holdout_fraction, tc.seed)?;

    // Level-k images by repeated down() from full resolution.
    let mut pyramid = vec![Vec::new(); top + 1];
    pyramid[top] = data.to_vec();
    if mode == TrainMode::Progressive {
        for k in (0..top).rev() {
            pyramid[k] = pyramid[k + 1].iter().map(down).collect::<Result<Vec<_>>>()?;
        }
    }

    let mut run = Run {
        setup,
        mode,
        top,
        pyramid,
        train_idx,
        hold_idx,
        stats: setup.stats.cloned().unwrap_or_default(),
    };
    run.ensure_stats(data)?;

    let mut report = TrainReport {
        format_version: REPORT_FORMAT_VERSION,
        run_id: run_id(&echo, mode, data)?,
        mode,
        config: echo,
        n_train: run.train_idx.len(),
        n_holdout: run.hold_idx.len(),
        holdout_indices: run.hold_idx.clone(),
        trace: LossTrace::default(),
        levels: Vec::new(),
        holdout: Vec::new(),
        growth_events: 0,
        stopped_early: false,
        total_steps: 0,
        best_step: None,
        best_holdout_loss: None,
        final_holdout_loss: None,
        final_blend: BlendState::full(0),
    };

    let mut model = match mode {
        TrainMode::Progressive => Autoencoder::<f32>::new(setup.model.clone(), tc.seed)?,
        TrainMode::Flat => Autoencoder::<f32>::new_full(setup.model.clone(), tc.seed)?,
    };
    let mut adam = Adam::new(tc.optimizer);
    let mut order_rng = rng(tc.seed, 2);
    let mut crop_rng = rng(tc.seed, 4);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;

    let mut best: Option<(f64, usize, Params<f32>, BlendState)> = None;
    let mut reference = f64::INFINITY;
    let mut stale = 0usize;
    let mut step = 0usize;
    let budget = match mode {
        TrainMode::Progressive => tc.steps_per_level,
        TrainMode::Flat => tc.steps_per_level * (top + 1),
    };
    let fail = |error: Error, report: &TrainReport| TrainFailure {
        error,
        partial: Some(Box::new(report.clone())),
    };

    'levels: for level in run.levels() {
        if mode == TrainMode::Progressive && level > 0 {
            model.grow().map_err(|e| fail(e, &report))?;
            report.growth_events += 1;
        }
        let uses = run.uses_features();
        report.levels.push(LevelSpan {
            level,
            resolution: setup.model.resolution(level),
            start_step: step,
            end_step: step,
            stage: uses.then(|| run.stage(level)),
            fade_stage: (uses && mode == TrainMode::Progressive && level > 0).then(|| run.stage(level - 1)),
        });
        let schedule = |s: usize| match mode {
            TrainMode::Progressive => alpha_at(s, level, tc),
            TrainMode::Flat => BlendState::full(level),
        };
        for within in 0..budget {
            let blend = schedule(within);
            model.set_alpha(blend.alpha).map_err(|e| fail(e, &report))?;

            let mut batch_idx = Vec::with_capacity(tc.batch_size);
            while batch_idx.len() < tc.batch_size {
                if cursor >= order.len() {
                    order = run.train_idx.clone();
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                batch_idx.push(order[cursor]);
                cursor += 1;
            }
            observer.on_batch(level, &batch_idx);
            let imgs = &run.pyramid[level];
            let batch: Vec<ImageTensor> = batch_idx
                .iter()
                .map(|&i| {
                    if tc.random_crop {
                        random_crop(&imgs[i], &mut crop_rng)
                    } else {
                        imgs[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&ImageTensor> = batch.iter().collect();
            let x = Tensor::stack(&refs).map_err(|e| fail(e, &report))?;
            let x = blend_input(&x, blend.alpha).map_err(|e| fail(e, &report))?;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = model
                .forward_on_tape(&mut tape, xv, blend, true)
                .map_err(|e| fail(e, &report))?;
            let per = run
                .ctx()
                .blended(&mut tape, xv, fwd.output, blend)
                .map_err(|e| fail(e, &report))?;
            let loss_var = tape.mean(per);
            let loss = tape.value(loss_var).data()[0] as f64;

            report.trace.step.push(step);
            report.trace.level.push(level);
            report.trace.alpha.push(blend.alpha);
            report.trace.loss.push(loss);

            let non_finite = Error::NonFinite {
                step,
                level,
                alpha: blend.alpha,
            };
            if !loss.is_finite() {
                report.total_steps = step;
                return Err(fail(non_finite, &report));
            }
            let mut grads = tape.backward(loss_var);
            for (name, var) in &fwd.params {
                if let Some(g) = grads.take(*var) {
                    let p = model.params_mut().get_mut(name).expect("parameter on tape");
                    adam.step(name, p, &g);
                }
            }
            if !params_finite(model.params()) {
                report.total_steps = step + 1;
                return Err(fail(non_finite, &report));
            }
            step += 1;
            report.levels.last_mut().unwrap().end_step = step;

            let last = within + 1 == budget;
            if step % tc.eval_every == 0 || last {
                let eval_blend = schedule(within + 1);
                model.set_alpha(eval_blend.alpha).map_err(|e| fail(e, &report))?;
                let h = run.holdout_loss(&model, eval_blend).map_err(|e| fail(e, &report))?;
                let eligible = level == top && eval_blend.alpha >= 1.0;
                let ev = HoldoutEval {
                    step,
                    level,
                    alpha: eval_blend.alpha,
                    loss: h,
                    eligible,
                };
                observer.on_holdout_eval(&ev);
                report.holdout.push(ev);
                report.final_holdout_loss = Some(h);
                if !h.is_finite() {
                    report.total_steps = step;
                    return Err(fail(
                        Error::NonFinite {
                            step,
                            level,
                            alpha: eval_blend.alpha,
                        },
                        &report,
                    ));
                }
                if eligible {
                    if best.as_ref().is_none_or(|b| h < b.0) {
                        best = Some((h, step, model.params().clone(), eval_blend));
                    }
                    if h < reference * (1.0 - tc.rel_improve_tol) {
                        reference = h;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= tc.patience {
                            report.stopped_early = !last;
                            break 'levels;
                        }
                    }
                }
            }
        }
    }

    report.total_steps = step;
    if let Some((loss, at, params, blend)) = best {
        *model.params_mut() = params;
        model.set_alpha(blend.alpha).map_err(|e| fail(e, &report))?;
        report.best_step = Some(at);
        report.best_holdout_loss = Some(loss);
    }
    report.final_blend = model.blend();
    Ok(Trained {
        model,
        report,
        stats: run.stats,
    })
}

//! Relative-perceptual-L1 reconstruction loss, its progressive (blended) form
//! and the optional additive pixel-L1 term.
//!
//! For normalized features `f̂(x) = (f(x) - mu) / sigma` the loss of a
//! reconstruction `xr` of `x` is `|f̂(x) - f̂(xr)|_1 / (|f̂(x)|_1 + eps)`, with
//! both norms summed over every channel and position of the stage tensor.
//! While a new resolution level fades in, the loss is
//! `alpha * L_k(x, xr) + (1 - alpha) * L_{k-1}(down(x), down(xr))`.

use serde::{Deserialize, Serialize};

use crate::autoencoder::BlendState;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureStats, StatsSet};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// A finite, non-negative loss value.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LossValue(f64);

impl LossValue {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::invalid(format!("loss must be finite and non-negative, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Relative-perceptual-L1, optionally plus `l1_weight` times pixel L1.
    Perceptual,
    /// Plain mean absolute pixel difference (the pixel-space baseline).
    PixelL1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Level `k` uses extractor stage `min(k + stage_offset, n_stages - 1)`.
    pub stage_offset: usize,
    pub epsilon: f64,
    pub l1_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Perceptual,
            stage_offset: 0,
            epsilon: DEFAULT_EPSILON,
            l1_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("loss epsilon must be > 0"));
        }
        if !(self.l1_weight >= 0.0) {
            return Err(Error::invalid("l1_weight must be >= 0"));
        }
        Ok(())
    }

    /// Extractor stage used at resolution level `level`; monotone and clamped.
    pub fn stage_for_level(&self, level: usize, n_stages: usize) -> usize {
        (level + self.stage_offset).min(n_stages.saturating_sub(1))
    }

    pub fn uses_features(&self) -> bool {
        self.kind == LossKind::Perceptual
    }
}

/// 2x2 average pooling of an image (`[C, H, W]`) or batch (`[N, C, H, W]`).
pub fn down<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.ndim() < 2 {
        return Err(Error::Shape(format!("down() needs spatial dims, got {:?}", x.shape())));
    }
    let (h, w) = x.hw();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("down() needs even spatial dims, got {h}x{w}")));
    }
    Ok(ops::avg_pool2(x))
}

/// Relative L1 between already-normalized feature tensors.
pub fn relative_l1<F: Scalar>(fx: &Tensor<F>, fr: &Tensor<F>, epsilon: f64) -> Result<f64> {
    if fx.shape() != fr.shape() {
        return Err(Error::Shape(format!("feature shapes {:?} vs {:?}", fx.shape(), fr.shape())));
    }
    let num: f64 = fx
        .data()
        .iter()
        .zip(fr.data())
        .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::NAN))
        .sum();
    let den: f64 = fx.data().iter().map(|a| a.abs().to_f64().unwrap_or(f64::NAN)).sum();
    Ok(num / (den + epsilon))
}

/// `alpha * high + (1 - alpha) * low`.
pub fn blend_terms(alpha: f64, low: f64, high: f64) -> f64 {
    alpha * high + (1.0 - alpha) * low
}

/// Inputs shared by every loss evaluation of one model.
pub struct LossContext<'a, F: Scalar> {
    pub extractor: Option<&'a FeatureExtractor<F>>,
    pub stats: &'a StatsSet,
    pub cfg: &'a LossConfig,
}

impl<'a, F: Scalar> LossContext<'a, F> {
    fn extractor(&self) -> Result<&'a FeatureExtractor<F>> {
        self.extractor
            .ok_or_else(|| Error::invalid("perceptual loss needs a feature extractor"))
    }

    /// Stage used at `level`.
    pub fn stage_for_level(&self, level: usize) -> usize {
        match self.extractor {
            Some(ex) => self.cfg.stage_for_level(level, ex.n_stages()),
            None => 0,
        }
    }

    /// Per-sample loss `[N]` at a single resolution, with features from `stage`.
    pub fn single_scale(&self, tape: &mut Tape<F>, target: Var, pred: Var, stage: usize) -> Result<Var> {
        if tape.value(target).shape() != tape.value(pred).shape() {
            return Err(Error::Shape(format!(
                "input {:?} vs reconstruction {:?}",
                tape.value(target).shape(),
                tape.value(pred).shape()
            )));
        }
        match self.cfg.kind {
            LossKind::PixelL1 => Ok(tape.mean_abs_diff(target, pred)),
            LossKind::Perceptual => {
                let res = tape.value(target).hw().0;
                let stats = self.stats.get(stage, res)?;
                let p = perceptual_on_tape(tape, self.extractor()?, stats, target, pred, self.cfg.epsilon)?;
                if self.cfg.l1_weight > 0.0 {
                    let l1 = tape.mean_abs_diff(target, pred);
                    let l1 = tape.scale(l1, F::of(self.cfg.l1_weight));
                    Ok(tape.add(p, l1))
                } else {
                    Ok(p)
                }
            }
        }
    }

    /// Per-sample progressive loss `[N]` for a batch at level `blend.level`.
    pub fn blended(&self, tape: &mut Tape<F>, target: Var, pred: Var, blend: BlendState) -> Result<Var> {
        blend.validate()?;
        let high_stage = self.stage_for_level(blend.level);
        if blend.level == 0 || blend.alpha >= 1.0 {
            return self.single_scale(tape, target, pred, high_stage);
        }
        let (h, w) = tape.value(target).hw();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("cannot fade {h}x{w}: dims must be even")));
        }
        let low_stage = self.stage_for_level(blend.level - 1);
        let t_low = tape.avg_pool2(target);
        let p_low = tape.avg_pool2(pred);
        let low = self.single_scale(tape, t_low, p_low, low_stage)?;
        if blend.alpha <= 0.0 {
            return Ok(low);
        }
        let high = self.single_scale(tape, target, pred, high_stage)?;
        Ok(tape.lerp(high, low, F::of(blend.alpha)))
    }
}

/// Record per-sample relative-perceptual-L1 between `target` and `pred` batches.
pub fn perceptual_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    extractor: &FeatureExtractor<F>,
    stats: &FeatureStats,
    target: Var,
    pred: Var,
    epsilon: f64,
) -> Result<Var> {
    let stage = stats.stage;
    let channels = extractor.stage(stage)?.channels;
    if stats.channels() != channels {
        return Err(Error::Shape(format!(
            "stage {stage} has {channels} channels but stats carry {}",
            stats.channels()
        )));
    }
    let mu: Vec<F> = stats.mu.iter().map(|&m| F::of(m)).collect();
    let sigma: Vec<F> = stats
        .sigma
        .iter()
        .map(|&s| F::of(s.max(crate::features::SIGMA_FLOOR)))
        .collect();
    let ft = extractor.extract_on_tape(tape, target, stage)?;
    let fp = extractor.extract_on_tape(tape, pred, stage)?;
    let nt = tape.channel_norm(ft, &mu, &sigma);
    let np = tape.channel_norm(fp, &mu, &sigma);
    Ok(tape.rel_l1(nt, np, F::of(epsilon)))
}

fn as_batch<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    match x.ndim() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            x.clone().reshape(&shape)
        }
        4 => Ok(x.clone()),
        _ => Err(Error::Shape(format!("expected an image or batch, got {:?}", x.shape()))),
    }
}

fn batch_mean<F: Scalar>(tape: &Tape<F>, per_sample: Var) -> Result<LossValue> {
    let v = tape.value(per_sample);
    let mean = v.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / v.numel() as f64;
    LossValue::new(mean)
}

/// Relative-perceptual-L1 of a reconstruction `xr` of `x` at one stage.
pub fn relative_perceptual_l1<F: Scalar>(
    x: &Tensor<F>,
    xr: &Tensor<F>,
    extractor: &FeatureExtractor<F>,
    stats: &FeatureStats,
    stage: usize,
) -> Result<LossValue> {
    if x.shape() != xr.shape() {
        return Err(Error::Shape(format!("input {:?} vs reconstruction {:?}", x.shape(), xr.shape())));
    }
    if stats.stage != stage {
        return Err(Error::MissingStats {
            stage,
            resolution: x.hw().0,
        });
    }
    let mut tape = Tape::new();
    let t = tape.constant(as_batch(x)?);
    let p = tape.constant(as_batch(xr)?);
    let l = perceptual_on_tape(&mut tape, extractor, stats, t, p, DEFAULT_EPSILON)?;
    batch_mean(&tape, l)
}

fn stats_set(stats_low: Option<&FeatureStats>, stats_high: &FeatureStats) -> StatsSet {
    let mut set = StatsSet::default();
    if let Some(low) = stats_low {
        set.insert(low.clone());
    }
    set.insert(stats_high.clone());
    set
}

/// Progressive loss with explicit low/high stage statistics; stages are taken from the stats.
#[allow(clippy::too_many_arguments)]
fn staged_loss<F: Scalar>(
    x: &Tensor<F>,
    xr: &Tensor<F>,
    blend: BlendState,
    extractor: &FeatureExtractor<F>,
    stats_low: Option<&FeatureStats>,
    stats_high: &FeatureStats,
    cfg: &LossConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    blend.validate()?;
    if x.shape() != xr.shape() {
        return Err(Error::Shape(format!("input {:?} vs reconstruction {:?}", x.shape(), xr.shape())));
    }
    let set = stats_set(stats_low, stats_high);
    let ctx = LossContext {
        extractor: Some(extractor),
        stats: &set,
        cfg,
    };
    let mut tape = Tape::new();
    let t = tape.constant(as_batch(x)?);
    let p = tape.constant(as_batch(xr)?);
    let fading = blend.level > 0 && blend.alpha < 1.0;
    let high = if blend.alpha > 0.0 || !fading {
        Some(ctx.single_scale(&mut tape, t, p, stats_high.stage)?)
    } else {
        None
    };
    let low = if fading {
        let (h, w) = x.hw();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("cannot fade {h}x{w}: dims must be even")));
        }
        let low_stats = stats_low.ok_or(Error::MissingStats {
            stage: usize::MAX,
            resolution: h / 2,
        })?;
        let tl = tape.avg_pool2(t);
        let pl = tape.avg_pool2(p);
        Some(ctx.single_scale(&mut tape, tl, pl, low_stats.stage)?)
    } else {
        None
    };
    match (high, low) {
        (Some(h), None) => batch_mean(&tape, h),
        (None, Some(l)) => batch_mean(&tape, l),
        (Some(h), Some(l)) => {
            let hv = batch_mean(&tape, h)?.value();
            let lv = batch_mean(&tape, l)?.value();
            LossValue::new(blend_terms(blend.alpha, lv, hv))
        }
        (None, None) => unreachable!("at least one loss term is active"),
    }
}

/// `alpha * L(f_high(x), f_high(xr)) + (1 - alpha) * L(f_low(down x), f_low(down xr))`.
///
/// The pixel-L1 term of `cfg` is ignored here; see [`combined_loss`].
pub fn blended_loss<F: Scalar>(
    x: &Tensor<F>,
    xr: &Tensor<F>,
    blend: BlendState,
    extractor: &FeatureExtractor<F>,
    stats_low: Option<&FeatureStats>,
    stats_high: &FeatureStats,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let perceptual = LossConfig {
        kind: LossKind::Perceptual,
        l1_weight: 0.0,
        ..cfg.clone()
    };
    staged_loss(x, xr, blend, extractor, stats_low, stats_high, &perceptual)
}

/// Perceptual term plus `cfg.l1_weight` times the mean absolute pixel difference.
pub fn combined_loss<F: Scalar>(
    x: &Tensor<F>,
    xr: &Tensor<F>,
    blend: BlendState,
    extractor: &FeatureExtractor<F>,
    stats_low: Option<&FeatureStats>,
    stats_high: &FeatureStats,
    cfg: &LossConfig,
) -> Result<LossValue> {
    staged_loss(x, xr, blend, extractor, stats_low, stats_high, cfg)
}

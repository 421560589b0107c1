//! Anomaly scoring with the reconstruction loss and ROC AUC evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::data::{Label, Sample};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, StatsSet};
use crate::loss::{LossConfig, LossContext};
use crate::tape::Tape;
use crate::tensor::{ImageTensor, Tensor};

pub const EVAL_FORMAT_VERSION: u32 = 1;
const SCORE_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

/// Something that maps a batch `[N, C, R, R]` to reconstructions of the same shape.
pub trait Reconstruct {
    /// Resolution level scoring runs at.
    fn level(&self) -> usize;
    fn resolution(&self) -> usize;
    fn reconstruct_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Reconstruct for Autoencoder<f32> {
    fn level(&self) -> usize {
        self.blend().level
    }

    fn resolution(&self) -> usize {
        self.config().resolution(self.blend().level)
    }

    fn reconstruct_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.is_fully_grown() {
            return Err(Error::invalid(format!(
                "scoring needs a fully grown model, this one is at level {} alpha {}",
                self.blend().level,
                self.blend().alpha
            )));
        }
        Autoencoder::reconstruct_batch(self, x, self.blend())
    }
}

/// Returns its input: every score is zero.
#[derive(Debug, Clone, Copy)]
pub struct IdentityModel {
    pub level: usize,
    pub resolution: usize,
}

impl Reconstruct for IdentityModel {
    fn level(&self) -> usize {
        self.level
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn reconstruct_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }
}

/// A model plus the loss it is scored with.
pub struct Detector<'a, M: Reconstruct> {
    pub model: &'a M,
    pub extractor: Option<&'a FeatureExtractor<f32>>,
    pub stats: &'a StatsSet,
    pub loss: &'a LossConfig,
}

impl<M: Reconstruct> Detector<'_, M> {
    fn check(&self, img: &ImageTensor) -> Result<()> {
        let s = img.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected a [C, H, W] image, got {s:?}")));
        }
        let expected = self.model.resolution();
        if s[1] != expected || s[2] != expected {
            return Err(Error::Resolution {
                expected,
                actual: s[1],
            });
        }
        Ok(())
    }

    /// Scores for a list of images, in order; higher means more anomalous.
    pub fn score_images(&self, images: &[&ImageTensor]) -> Result<Vec<f64>> {
        let ctx = LossContext {
            extractor: self.extractor,
            stats: self.stats,
            cfg: self.loss,
        };
        let stage = ctx.stage_for_level(self.model.level());
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(SCORE_BATCH) {
            for img in chunk {
                self.check(img)?;
            }
            let x = Tensor::stack(chunk)?;
            let xr = self.model.reconstruct_batch(&x)?;
            let mut tape = Tape::new();
            let t = tape.constant(x);
            let p = tape.constant(xr);
            let per = ctx.single_scale(&mut tape, t, p, stage)?;
            for &v in tape.value(per).data() {
                let v = v as f64;
                if !v.is_finite() {
                    return Err(Error::invalid("non-finite anomaly score"));
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Reconstruction loss of `x` against its own reconstruction.
    pub fn anomaly_score(&self, x: &ImageTensor) -> Result<f64> {
        Ok(self.score_images(&[x])?[0])
    }

    pub fn score_samples<'s>(&self, samples: impl IntoIterator<Item = &'s Sample>) -> Result<Vec<ScoredSample>> {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
        let scores = self.score_images(&images)?;
        Ok(samples
            .iter()
            .zip(scores)
            .map(|(s, score)| ScoredSample {
                id: s.id.clone(),
                score,
                label: s.label,
            })
            .collect())
    }
}

fn class_counts(samples: &[ScoredSample]) -> (usize, usize) {
    let n_anom = samples.iter().filter(|s| s.label == Label::Anomalous).count();
    (samples.len() - n_anom, n_anom)
}

/// Area under the ROC curve: the probability that a random anomalous sample
/// outscores a random normal one, ties counting one half. Computed from
/// midranks in `O(n log n)`.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<f64> {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label == Label::Anomalous).collect();
    roc_auc_scores(&scores, &labels)
}

/// [`roc_auc`] over parallel score and is-anomalous slices.
pub fn roc_auc_scores(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = anomalous.iter().filter(|&&a| a).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass {
            n_normal: n_neg,
            n_anomalous: n_pos,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 2 * midrank over positives, kept integral until the end.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| anomalous[k]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = R - p(p+1)/2, doubled.
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Samples scoring at least this value are flagged anomalous.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve with one point per distinct score, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<RocPoint>> {
    let (n_neg, n_pos) = class_counts(samples);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass {
            n_normal: n_neg,
            n_anomalous: n_pos,
        });
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let thr = sorted[i].score;
        while i < sorted.len() && sorted[i].score == thr {
            match sorted[i].label {
                Label::Anomalous => tp += 1,
                Label::Normal => fp += 1,
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: thr,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        let (mean, std) = mean_std(values);
        Self {
            count: n,
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub roc_auc: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub normal_scores: ScoreSummary,
    pub anomalous_scores: ScoreSummary,
    pub roc: Vec<RocPoint>,
}

impl EvalReport {
    pub fn from_scores(scored: &[ScoredSample]) -> Result<Self> {
        let (n_normal, n_anomalous) = class_counts(scored);
        let pick = |l: Label| -> Vec<f64> { scored.iter().filter(|s| s.label == l).map(|s| s.score).collect() };
        Ok(Self {
            format_version: EVAL_FORMAT_VERSION,
            roc_auc: roc_auc(scored)?,
            n_normal,
            n_anomalous,
            normal_scores: ScoreSummary::of(&pick(Label::Normal)),
            anomalous_scores: ScoreSummary::of(&pick(Label::Anomalous)),
            roc: roc_curve(scored)?,
        })
    }
}

/// Score every sample and summarize.
pub fn evaluate<'s, M: Reconstruct>(
    detector: &Detector<'_, M>,
    samples: impl IntoIterator<Item = &'s Sample>,
) -> Result<(EvalReport, Vec<ScoredSample>)> {
    let scored = detector.score_samples(samples)?;
    Ok((EvalReport::from_scores(&scored)?, scored))
}

pub fn write_scores_csv(path: &Path, scored: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "score", "label"])?;
    for s in scored {
        w.write_record([s.id.as_str(), &format!("{:?}", s.score), s.label.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::Manifest { row: i + 1, message: m };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", rec.len())));
        }
        out.push(ScoredSample {
            id: rec[0].to_string(),
            score: rec[1].parse().map_err(|e| bad(format!("score: {e}")))?,
            label: rec[2].parse().map_err(bad)?,
        });
    }
    Ok(out)
}

pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in roc {
        w.write_record([format!("{:?}", p.threshold), format!("{:?}", p.fpr), format!("{:?}", p.tpr)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

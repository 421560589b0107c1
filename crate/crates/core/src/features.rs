//! Frozen multi-stage feature extractors and the per-channel statistics used
//! to normalize their activations.
//!
//! Two extractor flavours share one contract: a fixed-random convolutional
//! stack built from a seed, and an adapter around a host-provided network
//! (typically an ImageNet classifier) exposed through [`FeatureBackend`].
//! Stage `k` of the fixed-random extractor sees the input downsampled by
//! `2^k`: stage 0 is a 3x3 convolution + ReLU at full resolution, every later
//! stage prepends a 2x2 average pool.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Lower bound applied to every computed standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub const STATS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageInfo {
    pub index: usize,
    /// Spatial reduction relative to the input.
    pub downsample: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PretrainedClassifier,
    FixedRandom,
}

/// Host-provided feature network. Implementations must be pure functions of
/// their (frozen) parameters and the input batch `[N, C, H, W]`.
pub trait FeatureBackend<F: Scalar>: Send + Sync {
    fn forward(&self, batch: &Tensor<F>, stage: usize) -> Tensor<F>;

    /// Vector-Jacobian product of [`FeatureBackend::forward`] with respect to the batch.
    fn backward(&self, batch: &Tensor<F>, stage: usize, grad_out: &Tensor<F>) -> Tensor<F>;
}

/// Serializable recipe for a fixed-random extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedRandomSpec {
    pub seed: u64,
    pub in_channels: usize,
    pub channels: Vec<usize>,
}

impl Default for FixedRandomSpec {
    fn default() -> Self {
        Self {
            seed: 1234,
            in_channels: 1,
            channels: vec![8, 16, 32, 32],
        }
    }
}

enum Backend<F: Scalar> {
    FixedRandom { spec: FixedRandomSpec, weights: Vec<Tensor<F>> },
    Adapter(Arc<dyn FeatureBackend<F>>),
}

pub struct FeatureExtractor<F: Scalar> {
    stages: Vec<StageInfo>,
    in_channels: usize,
    provenance: Provenance,
    backend: Backend<F>,
}

/// Activations of one extractor stage for a single image, `[C, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F: Scalar> {
    pub stage: usize,
    pub data: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub stage: usize,
    /// Input resolution the statistics were gathered at.
    pub resolution: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub source: String,
}

impl FeatureStats {
    /// `mu = 0`, `sigma = 1`: normalization becomes the identity.
    pub fn unit(stage: usize, resolution: usize, channels: usize) -> Self {
        Self {
            stage,
            resolution,
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
            source: "unit".into(),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

pub fn make_fixed_random_extractor<F: Scalar>(spec: &FixedRandomSpec) -> Result<FeatureExtractor<F>> {
    FeatureExtractor::fixed_random(spec)
}

impl<F: Scalar> FeatureExtractor<F> {
    pub fn fixed_random(spec: &FixedRandomSpec) -> Result<Self> {
        if spec.channels.is_empty() {
            return Err(Error::invalid("fixed-random extractor needs at least one stage"));
        }
        if spec.in_channels == 0 || spec.channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = Vec::with_capacity(spec.channels.len());
        let mut stages = Vec::with_capacity(spec.channels.len());
        let mut cin = spec.in_channels;
        for (k, &cout) in spec.channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let data: Vec<F> = (0..cout * cin * 9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    F::of(z * std)
                })
                .collect();
            weights.push(Tensor::new(vec![cout, cin, 3, 3], data)?);
            stages.push(StageInfo {
                index: k,
                downsample: 1 << k,
                channels: cout,
            });
            cin = cout;
        }
        Ok(Self {
            stages,
            in_channels: spec.in_channels,
            provenance: Provenance::FixedRandom,
            backend: Backend::FixedRandom {
                spec: spec.clone(),
                weights,
            },
        })
    }

    /// Wrap an external network. Stages must have strictly increasing downsample factors.
    pub fn pretrained(in_channels: usize, stages: Vec<StageInfo>, backend: Arc<dyn FeatureBackend<F>>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::invalid("extractor needs at least one stage"));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.index != i {
                return Err(Error::invalid(format!("stage {i} carries index {}", s.index)));
            }
            if s.downsample == 0 || !s.downsample.is_power_of_two() {
                return Err(Error::invalid(format!("stage {i}: downsample must be a power of two")));
            }
        }
        if stages.windows(2).any(|w| w[1].downsample <= w[0].downsample) {
            return Err(Error::invalid("stage downsample factors must strictly increase"));
        }
        Ok(Self {
            stages,
            in_channels,
            provenance: Provenance::PretrainedClassifier,
            backend: Backend::Adapter(backend),
        })
    }

    pub fn stages(&self) -> &[StageInfo] {
        &self.stages
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Recipe for rebuilding this extractor, if it is a fixed-random one.
    pub fn fixed_random_spec(&self) -> Option<&FixedRandomSpec> {
        match &self.backend {
            Backend::FixedRandom { spec, .. } => Some(spec),
            Backend::Adapter(_) => None,
        }
    }

    /// Frozen weights of a fixed-random extractor.
    pub fn weights(&self) -> Option<&[Tensor<F>]> {
        match &self.backend {
            Backend::FixedRandom { weights, .. } => Some(weights),
            Backend::Adapter(_) => None,
        }
    }

    pub fn stage(&self, stage: usize) -> Result<&StageInfo> {
        self.stages.get(stage).ok_or(Error::UnknownStage {
            stage,
            n_stages: self.stages.len(),
        })
    }

    fn check_input(&self, shape: &[usize], stage: usize) -> Result<&StageInfo> {
        let info = self.stage(stage)?;
        if shape.len() != 4 {
            return Err(Error::Shape(format!("extractor expects [N, C, H, W], got {shape:?}")));
        }
        if shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "extractor expects {} input channels, got {}",
                self.in_channels, shape[1]
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % info.downsample != 0 || w % info.downsample != 0 || h < info.downsample || w < info.downsample {
            return Err(Error::Shape(format!(
                "{h}x{w} input is not divisible by stage {stage}'s downsample factor {}",
                info.downsample
            )));
        }
        Ok(info)
    }

    /// Record stage activations of `x` (an `[N, C, H, W]` tape variable) on `tape`.
    pub fn extract_on_tape(&self, tape: &mut Tape<F>, x: Var, stage: usize) -> Result<Var> {
        self.check_input(tape.value(x).shape(), stage)?;
        match &self.backend {
            Backend::FixedRandom { weights, .. } => {
                let mut h = x;
                for (s, w) in weights.iter().enumerate().take(stage + 1) {
                    if s > 0 {
                        h = tape.avg_pool2(h);
                    }
                    let w = tape.constant(w.clone());
                    h = tape.conv2d(h, w, None);
                    h = tape.relu(h);
                }
                Ok(h)
            }
            Backend::Adapter(backend) => {
                let out = tape.external(x, stage, backend.clone());
                let info = &self.stages[stage];
                let s = tape.value(x).shape();
                let expect = [s[0], info.channels, s[2] / info.downsample, s[3] / info.downsample];
                if tape.value(out).shape() != expect {
                    return Err(Error::Shape(format!(
                        "adapter returned {:?} for stage {stage}, expected {expect:?}",
                        tape.value(out).shape()
                    )));
                }
                Ok(out)
            }
        }
    }

    /// Stage activations for a batch `[N, C, H, W]`.
    pub fn extract_batch(&self, batch: &Tensor<F>, stage: usize) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let y = self.extract_on_tape(&mut tape, x, stage)?;
        Ok(tape.value(y).clone())
    }

    /// Stage activations for a single `[C, H, W]` image.
    pub fn extract(&self, image: &Tensor<F>, stage: usize) -> Result<FeatureMap<F>> {
        if image.ndim() != 3 {
            return Err(Error::Shape(format!("expected a [C, H, W] image, got {:?}", image.shape())));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(&shape)?;
        let out = self.extract_batch(&batch, stage)?;
        let inner = out.shape()[1..].to_vec();
        Ok(FeatureMap {
            stage,
            data: out.reshape(&inner)?,
        })
    }

    /// Per-channel mean and standard deviation of stage responses, pooled over
    /// every spatial position of every image.
    pub fn compute_stats<'a, I>(&self, images: I, stage: usize, source: &str) -> Result<FeatureStats>
    where
        I: IntoIterator<Item = &'a Tensor<F>>,
    {
        let channels = self.stage(stage)?.channels;
        let mut sum = vec![0.0f64; channels];
        let mut sumsq = vec![0.0f64; channels];
        let mut count = 0usize;
        let mut resolution = None;
        let mut pending: Vec<&Tensor<F>> = Vec::new();
        let mut flush = |pending: &mut Vec<&Tensor<F>>| -> Result<()> {
            if pending.is_empty() {
                return Ok(());
            }
            let batch = Tensor::stack(pending)?;
            let feats = self.extract_batch(&batch, stage)?;
            let (h, w) = feats.hw();
            for (i, plane) in feats.data().chunks_exact(h * w).enumerate() {
                let c = i % channels;
                for &v in plane {
                    let v = v.to_f64().unwrap_or(f64::NAN);
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            count += pending.len() * h * w;
            pending.clear();
            Ok(())
        };
        for img in images {
            let (h, w) = img.hw();
            if h != w {
                return Err(Error::Shape(format!("stats need square images, got {h}x{w}")));
            }
            match resolution {
                None => resolution = Some(h),
                Some(r) if r != h => {
                    return Err(Error::Shape(format!("mixed resolutions {r} and {h} in stats dataset")))
                }
                _ => {}
            }
            pending.push(img);
            if pending.len() == 32 {
                flush(&mut pending)?;
            }
        }
        flush(&mut pending)?;
        if count == 0 {
            return Err(Error::EmptyDataset("feature statistics need at least one image".into()));
        }
        let n = count as f64;
        let mu: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let sigma = sumsq
            .iter()
            .zip(&mu)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(SIGMA_FLOOR))
            .collect();
        Ok(FeatureStats {
            stage,
            resolution: resolution.unwrap_or(0),
            mu,
            sigma,
            source: source.to_string(),
        })
    }
}

/// `(fm - mu) / sigma`, channel-wise.
pub fn normalize<F: Scalar>(fm: &FeatureMap<F>, stats: &FeatureStats) -> Result<FeatureMap<F>> {
    if fm.stage != stats.stage {
        return Err(Error::StageMismatch {
            map: fm.stage,
            stats: stats.stage,
        });
    }
    let c = fm.data.shape()[0];
    if stats.channels() != c {
        return Err(Error::Shape(format!("stats have {} channels, map has {c}", stats.channels())));
    }
    let (h, w) = fm.data.hw();
    let data = fm
        .data
        .data()
        .chunks_exact(h * w)
        .enumerate()
        .flat_map(|(i, plane)| {
            let (m, s) = (F::of(stats.mu[i]), F::of(stats.sigma[i].max(SIGMA_FLOOR)));
            plane.iter().map(move |&v| (v - m) / s)
        })
        .collect();
    Ok(FeatureMap {
        stage: fm.stage,
        data: Tensor::new(fm.data.shape().to_vec(), data)?,
    })
}

/// Statistics for every (stage, resolution) pair a model uses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSet {
    pub entries: Vec<FeatureStats>,
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    format_version: u32,
    entries: Vec<FeatureStats>,
}

impl StatsSet {
    pub fn get(&self, stage: usize, resolution: usize) -> Result<&FeatureStats> {
        self.entries
            .iter()
            .find(|s| s.stage == stage && s.resolution == resolution)
            .ok_or(Error::MissingStats { stage, resolution })
    }

    pub fn contains(&self, stage: usize, resolution: usize) -> bool {
        self.get(stage, resolution).is_ok()
    }

    pub fn insert(&mut self, stats: FeatureStats) {
        self.entries
            .retain(|s| !(s.stage == stats.stage && s.resolution == stats.resolution));
        self.entries.push(stats);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = StatsFile {
            format_version: STATS_FORMAT_VERSION,
            entries: self.entries.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: StatsFile = serde_json::from_str(&text)?;
        if file.format_version != STATS_FORMAT_VERSION {
            return Err(Error::Version {
                found: file.format_version,
                expected: STATS_FORMAT_VERSION,
            });
        }
        for s in &file.entries {
            if s.mu.len() != s.sigma.len() {
                return Err(Error::Corrupt(format!("stage {} stats have mismatched lengths", s.stage)));
            }
        }
        Ok(Self { entries: file.entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> FixedRandomSpec {
        FixedRandomSpec {
            seed,
            in_channels: 1,
            channels: vec![4, 6, 8],
        }
    }

    fn probe(res: usize, phase: f32) -> Tensor<f32> {
        let data = (0..res * res)
            .map(|i| 0.5 + 0.4 * ((i as f32) * 0.37 + phase).sin())
            .collect();
        Tensor::new(vec![1, res, res], data).unwrap()
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let ex = FeatureExtractor::<f32>::fixed_random(&spec(3)).unwrap();
        for stage in 0..3 {
            let fm = ex.extract(&Tensor::zeros(&[1, 16, 16]), stage).unwrap();
            assert!(fm.data.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn extraction_is_deterministic_and_shape_exact() {
        let ex = FeatureExtractor::<f32>::fixed_random(&spec(3)).unwrap();
        let img = probe(32, 0.0);
        let a = ex.extract(&img, 2).unwrap();
        let b = ex.extract(&img, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data.shape(), &[8, 8, 8]);
        let stages: Vec<usize> = ex.stages().iter().map(|s| s.downsample).collect();
        assert_eq!(stages, vec![1, 2, 4]);
        assert_eq!(ex.provenance(), Provenance::FixedRandom);
    }

    #[test]
    fn seeds_control_weights() {
        let a = FeatureExtractor::<f32>::fixed_random(&spec(3)).unwrap();
        let b = FeatureExtractor::<f32>::fixed_random(&spec(3)).unwrap();
        let c = FeatureExtractor::<f32>::fixed_random(&spec(4)).unwrap();
        let img = probe(16, 0.3);
        assert_eq!(a.extract(&img, 1).unwrap(), b.extract(&img, 1).unwrap());
        assert_ne!(a.extract(&img, 1).unwrap(), c.extract(&img, 1).unwrap());
    }

    #[test]
    fn extract_errors() {
        let ex = FeatureExtractor::<f32>::fixed_random(&spec(3)).unwrap();
        assert!(matches!(ex.extract(&probe(16, 0.0), 7), Err(Error::UnknownStage { .. })));
        assert!(matches!(ex.extract(&Tensor::zeros(&[1, 6, 6]), 2), Err(Error::Shape(_))));
        assert!(matches!(ex.extract(&Tensor::zeros(&[3, 8, 8]), 0), Err(Error::Shape(_))));
        assert!(FeatureExtractor::<f32>::fixed_random(&FixedRandomSpec {
            channels: vec![],
            ..spec(1)
        })
        .is_err());
    }

    #[test]
    fn constant_features_floor_sigma() {
        let ex = FeatureExtractor::<f32>::fixed_random(&spec(3)).unwrap();
        let imgs = vec![Tensor::zeros(&[1, 8, 8]); 3];
        let st = ex.compute_stats(&imgs, 1, "zeros").unwrap();
        assert!(st.sigma.iter().all(|&s| s == SIGMA_FLOOR));
        assert!(st.mu.iter().all(|&m| m == 0.0));
        assert!(matches!(
            ex.compute_stats(std::iter::empty(), 0, "none"),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn normalize_arithmetic() {
        let fm = FeatureMap {
            stage: 0,
            data: Tensor::new(vec![1, 1, 2], vec![5.0f64, 1.0]).unwrap(),
        };
        let st = FeatureStats {
            stage: 0,
            resolution: 2,
            mu: vec![1.0],
            sigma: vec![2.0],
            source: "t".into(),
        };
        let out = normalize(&fm, &st).unwrap();
        assert_eq!(out.data.data(), &[2.0, 0.0]);
        let again = normalize(&out, &FeatureStats::unit(0, 2, 1)).unwrap();
        assert_eq!(again, out);
        let wrong = FeatureStats { stage: 1, ..st };
        assert!(matches!(normalize(&fm, &wrong), Err(Error::StageMismatch { .. })));
    }

    #[test]
    fn stats_file_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let mut set = StatsSet::default();
        set.insert(FeatureStats::unit(1, 16, 3));
        set.save(&path).unwrap();
        assert_eq!(StatsSet::load(&path).unwrap(), set);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(StatsSet::load(&path), Err(Error::Version { found: 2, .. })));
    }
}

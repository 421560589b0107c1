//! Band-limited noise textures with planted spectral shifts.
//!
//! A normal image is white noise filtered by a Gaussian ring of radius
//! `0.15 * res` and width `0.03 * res` in the frequency domain, normalized to
//! unit variance and mapped to pixels `clamp(0.5 + 0.15 t)`. A `patch-shift`
//! anomaly replaces a random half-side square with texture whose ring radius
//! is scaled by `1 - 0.5 s`; a `global-shift` anomaly scales the ring radius
//! of the whole image by `1 - 0.3 s`, where `s` is the subtlety knob.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{write_png, Dataset, Label, Manifest, ManifestRow, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

const RING_RADIUS: f64 = 0.15;
const RING_WIDTH: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyType {
    PatchShift,
    GlobalShift,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 2] = [AnomalyType::PatchShift, AnomalyType::GlobalShift];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyType::PatchShift => "patch-shift",
            AnomalyType::GlobalShift => "global-shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub resolution: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Labelled anomalies available for building validation sets.
    pub n_val_pool: usize,
    /// 0 makes anomalies indistinguishable from normals; 1 is the default shift.
    pub subtlety: f64,
    /// Side of the planted patch relative to the image side.
    pub patch_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 32,
            n_train: 2000,
            n_test_normal: 200,
            n_test_anomalous: 200,
            n_val_pool: 100,
            subtlety: 1.0,
            patch_fraction: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return Err(Error::invalid(format!(
                "synthetic resolution must be a power of two >= 16, got {}",
                self.resolution
            )));
        }
        if !(0.0..=1.5).contains(&self.subtlety) {
            return Err(Error::invalid("subtlety must be in [0, 1.5]"));
        }
        if !(self.patch_fraction > 0.0 && self.patch_fraction <= 1.0) {
            return Err(Error::invalid("patch_fraction must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn n_normal(&self) -> usize {
        self.n_train + self.n_test_normal
    }

    pub fn n_anomalous(&self) -> usize {
        self.n_test_anomalous + self.n_val_pool
    }
}

fn fft_freq(i: usize, n: usize) -> f64 {
    if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Unit-variance texture of side `res` whose spectrum is a Gaussian ring.
pub fn texture(rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>, res: usize, radius: f64, width: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(res * res);
    for y in 0..res {
        let fy = fft_freq(y, res);
        for x in 0..res {
            let fx = fft_freq(x, res);
            let rho = (fx * fx + fy * fy).sqrt();
            let amp = (-0.5 * ((rho - radius) / width).powi(2)).exp();
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            buf.push(Complex::new(re * amp, im * amp));
        }
    }
    let fft = planner.plan_fft_inverse(res);
    fft.process(&mut buf);
    let mut t = vec![Complex::new(0.0, 0.0); res * res];
    for y in 0..res {
        for x in 0..res {
            t[x * res + y] = buf[y * res + x];
        }
    }
    fft.process(&mut t);
    let real: Vec<f64> = t.iter().map(|c| c.re).collect();
    let mean = real.iter().sum::<f64>() / real.len() as f64;
    let var = real.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / real.len() as f64;
    let sd = var.sqrt().max(1e-12);
    real.iter().map(|v| v / sd).collect()
}

fn to_image(t: &[f64], res: usize) -> ImageTensor {
    let data = t
        .iter()
        .map(|v| ((0.5 + 0.15 * v).clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0)
        .collect();
    Tensor::new(vec![1, res, res], data).unwrap()
}

fn generate_one(spec: &SynthSpec, planner: &mut FftPlanner<f64>, index: usize, kind: Option<AnomalyType>) -> ImageTensor {
    let res = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let r0 = RING_RADIUS * res as f64;
    let width = RING_WIDTH * res as f64;
    let s = spec.subtlety;
    let t = match kind {
        None => texture(&mut rng, planner, res, r0, width),
        Some(AnomalyType::GlobalShift) => texture(&mut rng, planner, res, r0 * (1.0 - 0.3 * s), width),
        Some(AnomalyType::PatchShift) => {
            let mut t = texture(&mut rng, planner, res, r0, width);
            if s > 0.0 {
                let p = texture(&mut rng, planner, res, r0 * (1.0 - 0.5 * s), width);
                let ps = ((res as f64 * spec.patch_fraction) as usize).clamp(1, res);
                let y0 = rng.random_range(0..=res - ps);
                let x0 = rng.random_range(0..=res - ps);
                for y in y0..y0 + ps {
                    for x in x0..x0 + ps {
                        t[y * res + x] = p[y * res + x];
                    }
                }
            }
            t
        }
    };
    to_image(&t, res)
}

/// Generate the full dataset in memory. Pixels sit on the 8-bit grid, so
/// writing and re-reading the PNGs reproduces them exactly.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut planner = FftPlanner::new();
    let plan: [(Split, Label, usize); 4] = [
        (Split::Train, Label::Normal, spec.n_train),
        (Split::Test, Label::Normal, spec.n_test_normal),
        (Split::Test, Label::Anomalous, spec.n_test_anomalous),
        (Split::ValPool, Label::Anomalous, spec.n_val_pool),
    ];
    let mut samples = Vec::with_capacity(spec.n_normal() + spec.n_anomalous());
    let mut index = 0usize;
    for (split, label, n) in plan {
        for j in 0..n {
            let kind = (label == Label::Anomalous).then(|| AnomalyType::ALL[j % 2]);
            let image = generate_one(spec, &mut planner, index, kind);
            let tag = match kind {
                Some(k) => k.as_str(),
                None => "normal",
            };
            samples.push(Sample {
                id: format!("images/{split}-{tag}-{index:05}.png"),
                label,
                split,
                anomaly_type: kind.map(|k| k.as_str().to_string()),
                image,
            });
            index += 1;
        }
    }
    Ok(Dataset { samples })
}

/// Write the dataset's PNGs under `dir/images` plus `dir/manifest.csv`.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> Result<Manifest> {
    let ds = generate_synthetic(spec)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        write_png(&dir.join(&s.id), &s.image)?;
        rows.push(ManifestRow {
            path: s.id.clone(),
            label: s.label,
            split: s.split,
            anomaly_type: s.anomaly_type.clone(),
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        rows,
    };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

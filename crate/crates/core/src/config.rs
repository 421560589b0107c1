//! Run configuration as flat `section.key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. Lists are comma
//! separated. Every key has a default, so an empty file is a valid config.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoencoder::ModelConfig;
use crate::data::PreprocessSpec;
use crate::error::{Error, Result};
use crate::features::FixedRandomSpec;
use crate::hparam::{SearchSettings, SearchSpace, SweepSpec};
use crate::loss::{LossConfig, LossKind};
use crate::train::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub grayscale: bool,
    pub center_crop: bool,
    pub hist_equalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorOptions {
    pub spec: FixedRandomSpec,
    /// Precomputed statistics to use instead of computing them on the training normals.
    pub stats_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub bottleneck_dims: Vec<usize>,
    pub stage_offsets: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub grayscale: Vec<bool>,
    pub center_crop: Vec<bool>,
    pub hist_equalize: Vec<bool>,
    pub k_folds: usize,
    pub trial_steps_per_level: usize,
    pub seed: u64,
    pub n_types: usize,
    pub n_examples: usize,
    pub validation_seed: u64,
    pub flat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub preprocess: PreprocessOptions,
    pub extractor: ExtractorOptions,
    pub search: SearchOptions,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            preprocess: PreprocessOptions {
                grayscale: true,
                center_crop: false,
                hist_equalize: false,
            },
            extractor: ExtractorOptions {
                spec: FixedRandomSpec::default(),
                stats_file: None,
            },
            search: SearchOptions {
                bottleneck_dims: vec![8, 16],
                stage_offsets: vec![0, 1],
                resolutions: vec![32],
                grayscale: vec![true],
                center_crop: vec![false],
                hist_equalize: vec![false],
                k_folds: 3,
                trial_steps_per_level: 500,
                seed: 0,
                n_types: 1,
                n_examples: 20,
                validation_seed: 0,
                flat: false,
            },
            sweep: SweepSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse `{v}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Config {
            key: key.to_string(),
            message: "list must not be empty".into(),
        });
    }
    items.into_iter().map(|s| parse(key, s)).collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    pub fn preprocess_spec(&self) -> PreprocessSpec {
        PreprocessSpec {
            resolution: self.model.target_resolution,
            grayscale: self.preprocess.grayscale,
            center_crop: self.preprocess.center_crop,
            hist_equalize: self.preprocess.hist_equalize,
        }
    }

    pub fn search_space(&self) -> SearchSpace {
        let s = &self.search;
        let mut pre = Vec::new();
        for &resolution in &s.resolutions {
            for &grayscale in &s.grayscale {
                for &center_crop in &s.center_crop {
                    for &hist_equalize in &s.hist_equalize {
                        pre.push(PreprocessSpec {
                            resolution,
                            grayscale,
                            center_crop,
                            hist_equalize,
                        });
                    }
                }
            }
        }
        SearchSpace {
            bottleneck_dims: s.bottleneck_dims.clone(),
            stage_offsets: s.stage_offsets.clone(),
            preprocess: pre,
        }
    }

    pub fn search_settings(&self) -> SearchSettings {
        SearchSettings {
            model: self.model.clone(),
            trial_train: TrainConfig {
                steps_per_level: self.search.trial_steps_per_level,
                ..self.train.clone()
            },
            final_train: self.train.clone(),
            loss: self.loss.clone(),
            extractor: self.extractor.spec.clone(),
            mode: if self.search.flat {
                TrainMode::Flat
            } else {
                TrainMode::Progressive
            },
            k_folds: self.search.k_folds,
            seed: self.search.seed,
        }
    }

    /// Set one dotted key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "model.base_resolution" => self.model.base_resolution = parse(k, v)?,
            "model.target_resolution" => self.model.target_resolution = parse(k, v)?,
            "model.bottleneck_dim" => self.model.bottleneck_dim = parse(k, v)?,
            "model.base_channels" => self.model.base_channels = parse(k, v)?,
            "model.max_channels" => self.model.max_channels = parse(k, v)?,
            "model.input_channels" => self.model.input_channels = parse(k, v)?,
            "model.blocks_per_level" => self.model.blocks_per_level = parse(k, v)?,
            "train.steps_per_level" => self.train.steps_per_level = parse(k, v)?,
            "train.fade_fraction" => self.train.fade_fraction = parse(k, v)?,
            "train.lr" => self.train.optimizer.lr = parse(k, v)?,
            "train.beta1" => self.train.optimizer.beta1 = parse(k, v)?,
            "train.beta2" => self.train.optimizer.beta2 = parse(k, v)?,
            "train.adam_eps" => self.train.optimizer.eps = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.holdout_fraction" => self.train.holdout_fraction = parse(k, v)?,
            "train.patience" => self.train.patience = parse(k, v)?,
            "train.rel_improve_tol" => self.train.rel_improve_tol = parse(k, v)?,
            "train.eval_every" => self.train.eval_every = parse(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,
            "train.stats_max_images" => self.train.stats_max_images = parse(k, v)?,
            "train.random_crop" => self.train.random_crop = parse(k, v)?,
            "loss.kind" => {
                self.loss.kind = match v {
                    "perceptual" => LossKind::Perceptual,
                    "pixel-l1" => LossKind::PixelL1,
                    _ => {
                        return Err(Error::Config {
                            key: k.into(),
                            message: format!("unknown loss kind `{v}` (perceptual or pixel-l1)"),
                        })
                    }
                }
            }
            "loss.stage_offset" => self.loss.stage_offset = parse(k, v)?,
            "loss.epsilon" => self.loss.epsilon = parse(k, v)?,
            "loss.l1_weight" => self.loss.l1_weight = parse(k, v)?,
            "preprocess.grayscale" => self.preprocess.grayscale = parse(k, v)?,
            "preprocess.center_crop" => self.preprocess.center_crop = parse(k, v)?,
            "preprocess.hist_equalize" => self.preprocess.hist_equalize = parse(k, v)?,
            "extractor.seed" => self.extractor.spec.seed = parse(k, v)?,
            "extractor.in_channels" => self.extractor.spec.in_channels = parse(k, v)?,
            "extractor.channels" => self.extractor.spec.channels = parse_list(k, v)?,
            "extractor.stats_file" => self.extractor.stats_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "search.bottleneck_dims" => self.search.bottleneck_dims = parse_list(k, v)?,
            "search.stage_offsets" => self.search.stage_offsets = parse_list(k, v)?,
            "search.resolutions" => self.search.resolutions = parse_list(k, v)?,
            "search.grayscale" => self.search.grayscale = parse_list(k, v)?,
            "search.center_crop" => self.search.center_crop = parse_list(k, v)?,
            "search.hist_equalize" => self.search.hist_equalize = parse_list(k, v)?,
            "search.k_folds" => self.search.k_folds = parse(k, v)?,
            "search.trial_steps_per_level" => self.search.trial_steps_per_level = parse(k, v)?,
            "search.seed" => self.search.seed = parse(k, v)?,
            "search.n_types" => self.search.n_types = parse(k, v)?,
            "search.n_examples" => self.search.n_examples = parse(k, v)?,
            "search.validation_seed" => self.search.validation_seed = parse(k, v)?,
            "search.flat" => self.search.flat = parse(k, v)?,
            "sweep.n_types" => self.sweep.n_types = parse_list(k, v)?,
            "sweep.n_examples" => self.sweep.n_examples = parse_list(k, v)?,
            "sweep.repeats" => self.sweep.repeats = parse(k, v)?,
            "sweep.seed" => self.sweep.seed = parse(k, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        let p = &self.preprocess;
        let e = &self.extractor;
        let s = &self.search;
        let w = &self.sweep;
        vec![
            ("model.base_resolution", m.base_resolution.to_string()),
            ("model.target_resolution", m.target_resolution.to_string()),
            ("model.bottleneck_dim", m.bottleneck_dim.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.max_channels", m.max_channels.to_string()),
            ("model.input_channels", m.input_channels.to_string()),
            ("model.blocks_per_level", m.blocks_per_level.to_string()),
            ("train.steps_per_level", t.steps_per_level.to_string()),
            ("train.fade_fraction", float(t.fade_fraction)),
            ("train.lr", float(t.optimizer.lr)),
            ("train.beta1", float(t.optimizer.beta1)),
            ("train.beta2", float(t.optimizer.beta2)),
            ("train.adam_eps", float(t.optimizer.eps)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.holdout_fraction", float(t.holdout_fraction)),
            ("train.patience", t.patience.to_string()),
            ("train.rel_improve_tol", float(t.rel_improve_tol)),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.stats_max_images", t.stats_max_images.to_string()),
            ("train.random_crop", t.random_crop.to_string()),
            (
                "loss.kind",
                match l.kind {
                    LossKind::Perceptual => "perceptual".into(),
                    LossKind::PixelL1 => "pixel-l1".into(),
                },
            ),
            ("loss.stage_offset", l.stage_offset.to_string()),
            ("loss.epsilon", float(l.epsilon)),
            ("loss.l1_weight", float(l.l1_weight)),
            ("preprocess.grayscale", p.grayscale.to_string()),
            ("preprocess.center_crop", p.center_crop.to_string()),
            ("preprocess.hist_equalize", p.hist_equalize.to_string()),
            ("extractor.seed", e.spec.seed.to_string()),
            ("extractor.in_channels", e.spec.in_channels.to_string()),
            ("extractor.channels", list(&e.spec.channels)),
            (
                "extractor.stats_file",
                e.stats_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("search.bottleneck_dims", list(&s.bottleneck_dims)),
            ("search.stage_offsets", list(&s.stage_offsets)),
            ("search.resolutions", list(&s.resolutions)),
            ("search.grayscale", list(&s.grayscale)),
            ("search.center_crop", list(&s.center_crop)),
            ("search.hist_equalize", list(&s.hist_equalize)),
            ("search.k_folds", s.k_folds.to_string()),
            ("search.trial_steps_per_level", s.trial_steps_per_level.to_string()),
            ("search.seed", s.seed.to_string()),
            ("search.n_types", s.n_types.to_string()),
            ("search.n_examples", s.n_examples.to_string()),
            ("search.validation_seed", s.validation_seed.to_string()),
            ("search.flat", s.flat.to_string()),
            ("sweep.n_types", list(&w.n_types)),
            ("sweep.n_examples", list(&w.n_examples)),
            ("sweep.repeats", w.repeats.to_string()),
            ("sweep.seed", w.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", i + 1),
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.to_string(),
            message: "override must look like key=value".into(),
        })?;
        self.set(k.trim(), v.trim())
    }

    /// Cross-field checks; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let tag = |key: &str, e: Error| Error::Config {
            key: key.into(),
            message: e.to_string(),
        };
        self.model.validate().map_err(|e| tag("model", e))?;
        self.train.validate().map_err(|e| tag("train", e))?;
        self.loss.validate().map_err(|e| tag("loss", e))?;
        if self.extractor.spec.channels.is_empty() {
            return Err(tag("extractor.channels", Error::invalid("need at least one stage")));
        }
        if self.search.k_folds < 2 {
            return Err(tag("search.k_folds", Error::invalid("need at least 2 folds")));
        }
        if self.sweep.repeats == 0 {
            return Err(tag("sweep.repeats", Error::invalid("need at least 1 repeat")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("model.bottleneck_dim", "7").unwrap();
        c.set("train.lr", "0.0003").unwrap();
        c.set("loss.kind", "pixel-l1").unwrap();
        c.set("extractor.channels", "4, 8,8").unwrap();
        c.set("extractor.stats_file", "s.json").unwrap();
        c.set("search.grayscale", "true,false").unwrap();
        let again = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.extractor.spec.channels, vec![4, 8, 8]);
    }

    #[test]
    fn errors_name_the_key() {
        match RunConfig::parse("model.bottleneck_dim = many\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.bottleneck_dim"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("model.colour = 3\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.colour"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("just words\n").is_err());
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut c = RunConfig::parse("# hello\n\ntrain.seed = 4\n").unwrap();
        assert_eq!(c.train.seed, 4);
        c.apply_override("train.seed=5").unwrap();
        assert_eq!(c.train.seed, 5);
        assert!(c.apply_override("train.seed").is_err());
    }

    #[test]
    fn search_space_is_the_cartesian_product() {
        let mut c = RunConfig::default();
        c.set("search.grayscale", "true,false").unwrap();
        c.set("search.hist_equalize", "false,true").unwrap();
        let s = c.search_space();
        assert_eq!(s.preprocess.len(), 4);
        assert_eq!(s.configs().len(), 2 * 2 * 4);
    }
}

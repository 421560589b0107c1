//! The `dpa` command line.
//!
//! Every command writes into a single output location and refuses to replace
//! existing files unless `--force` is given. Failures print one JSON line to
//! stderr and exit with 2 (config), 3 (data), 4 (numeric) or 1 (anything else).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autoencoder::Autoencoder;
use crate::config::RunConfig;
use crate::data::{Dataset, Manifest, Sample, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_scores_csv, write_roc_csv, write_scores_csv, Detector, EvalReport};
use crate::features::{FeatureExtractor, StatsSet};
use crate::hparam::{build_validation_set, check_disjoint, cross_validate, sensitivity_sweep, ValidationSpec};
use crate::train::{fit, TrainMode, TrainSetup};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.dpa";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const STATS_FILE: &str = "stats.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const SEARCH_REPORT_FILE: &str = "search_report.json";
pub const TRIALS_LOG_FILE: &str = "trials.jsonl";
pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";
pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "dpa", version, about = "Deep perceptual autoencoders for image anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Progressive-growing training on the manifest's train split.
    Train(TrainArgs),
    /// Training at the target resolution only, without growth.
    TrainFlat(TrainArgs),
    /// Write per-sample anomaly scores for one split.
    Score(ScoreArgs),
    /// ROC AUC evaluation from a run directory or a scores CSV.
    Eval(EvalArgs),
    /// Cross-validated grid search with a small validation set of anomalies.
    Search(SearchArgs),
    /// Selection quality over validation-set sizes and type counts.
    Sweep(SweepArgs),
    /// Write the synthetic texture dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.bottleneck_dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Override keys of the run's config (preprocessing, for instance).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "scores")]
    pub run: Option<PathBuf>,
    #[arg(long, requires = "run")]
    pub manifest: Option<PathBuf>,
    /// Evaluate an existing scores CSV instead of scoring.
    #[arg(long, conflicts_with = "run")]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub force: bool,
    /// Continue an interrupted search from its trials log.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_test_normal: usize,
    #[arg(long, default_value_t = 200)]
    pub n_test_anomalous: usize,
    #[arg(long, default_value_t = 100)]
    pub n_val_pool: usize,
    #[arg(long, default_value_t = 1.0)]
    pub subtlety: f64,
    #[arg(long)]
    pub force: bool,
}

/// Exit code class of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::Manifest { .. }
        | Error::Decode { .. }
        | Error::EmptyDataset(_)
        | Error::SingleClass { .. }
        | Error::InsufficientPool(_)
        | Error::Resolution { .. }
        | Error::Shape(_)
        | Error::Csv(_) => 3,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

fn kind(code: i32) -> &'static str {
    match code {
        2 => "config",
        3 => "data",
        4 => "numeric",
        _ => "other",
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    code: i32,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    key: Option<&'a str>,
}

/// The one-line JSON error record printed on failure.
pub fn error_record(e: &Error) -> String {
    let code = exit_code(e);
    let rec = ErrorRecord {
        error: kind(code),
        code,
        message: e.to_string(),
        key: match e {
            Error::Config { key, .. } => Some(key),
            _ => None,
        },
    };
    serde_json::to_string(&rec).expect("error record serializes")
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a, TrainMode::Progressive),
        Command::TrainFlat(a) => cmd_train(&a, TrainMode::Flat),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Search(a) => cmd_search(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn prepare_dir(dir: &Path, force: bool, allow_existing: bool) -> Result<()> {
    if dir.exists() && !force && !allow_existing {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            return Err(Error::Exists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|m: String| Error::Config {
        key: "split".into(),
        message: m,
    })
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    Manifest::load(manifest)?.load_dataset()
}

/// Match the model and extractor input channels to the preprocessed data.
fn sync_channels(cfg: &mut RunConfig, data: &Dataset) -> Result<()> {
    let Some(first) = data.samples.first() else {
        return Err(Error::EmptyDataset("manifest has no rows".into()));
    };
    let c = first.image.shape()[0];
    if data.samples.iter().any(|s| s.image.shape()[0] != c) {
        return Err(Error::Shape(
            "images have differing channel counts; set preprocess.grayscale = true".into(),
        ));
    }
    cfg.model.input_channels = c;
    cfg.extractor.spec.in_channels = c;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, mode: TrainMode) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    let raw = load_dataset(&a.manifest)?;
    let data = Dataset {
        samples: raw.split(Split::Train).cloned().collect(),
    }
    .preprocessed(&cfg.preprocess_spec())?;
    sync_channels(&mut cfg, &data)?;
    prepare_dir(&a.out, a.force, false)?;
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_text())?;
    let images = data.train_images()?;
    let extractor = FeatureExtractor::<f32>::fixed_random(&cfg.extractor.spec)?;
    let stats = cfg.extractor.stats_file.as_deref().map(StatsSet::load).transpose()?;
    let setup = TrainSetup {
        model: &cfg.model,
        train: &cfg.train,
        loss: &cfg.loss,
        extractor: Some(&extractor),
        stats: stats.as_ref(),
    };
    match fit(&images, &setup, mode, &mut ()) {
        Ok(t) => {
            t.model.save_checkpoint(&a.out.join(CHECKPOINT_FILE))?;
            write_text(&a.out.join(TRAIN_REPORT_FILE), &t.report.to_json()?)?;
            t.stats.save(&a.out.join(STATS_FILE))?;
            Ok(())
        }
        Err(f) => {
            if let Some(p) = &f.partial {
                write_text(&a.out.join("train_report.partial.json"), &p.to_json()?)?;
            }
            Err(f.error)
        }
    }
}

struct LoadedRun {
    cfg: RunConfig,
    model: Autoencoder<f32>,
    stats: StatsSet,
    extractor: FeatureExtractor<f32>,
}

fn load_run(dir: &Path, overrides: &[String]) -> Result<LoadedRun> {
    let mut cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    let model = Autoencoder::load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let stats = StatsSet::load(&dir.join(STATS_FILE))?;
    let extractor = FeatureExtractor::fixed_random(&cfg.extractor.spec)?;
    Ok(LoadedRun {
        cfg,
        model,
        stats,
        extractor,
    })
}

fn score_split(run: &LoadedRun, manifest: &Path, split: Split) -> Result<Vec<crate::eval::ScoredSample>> {
    let raw = load_dataset(manifest)?;
    let samples: Vec<Sample> = raw.split(split).cloned().collect();
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("manifest has no {split} rows")));
    }
    let data = Dataset { samples }.preprocessed(&run.cfg.preprocess_spec())?;
    let d = Detector {
        model: &run.model,
        extractor: Some(&run.extractor),
        stats: &run.stats,
        loss: &run.cfg.loss,
    };
    d.score_samples(&data.samples)
}

pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    if a.out.exists() && !a.force {
        return Err(Error::Exists(a.out.clone()));
    }
    let run = load_run(&a.run, &a.overrides)?;
    let scored = score_split(&run, &a.manifest, split)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_scores_csv(&a.out, &scored)
}

#[derive(Serialize)]
struct EvalArtifact<'a> {
    format_version: u32,
    split: &'a str,
    source: String,
    config: Option<String>,
    report: &'a EvalReport,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let (scored, source, config) = match (&a.scores, &a.run, &a.manifest) {
        (Some(csv), _, _) => (read_scores_csv(csv)?, csv.display().to_string(), None),
        (None, Some(run_dir), Some(manifest)) => {
            let run = load_run(run_dir, &a.overrides)?;
            let raw = load_dataset(manifest)?;
            let samples: Vec<Sample> = raw.split(split).cloned().collect();
            let data = Dataset { samples }.preprocessed(&run.cfg.preprocess_spec())?;
            let d = Detector {
                model: &run.model,
                extractor: Some(&run.extractor),
                stats: &run.stats,
                loss: &run.cfg.loss,
            };
            let (_, scored) = evaluate(&d, &data.samples)?;
            (scored, run_dir.display().to_string(), Some(run.cfg.to_text()))
        }
        _ => {
            return Err(Error::Config {
                key: "manifest".into(),
                message: "eval needs --scores, or --run together with --manifest".into(),
            })
        }
    };
    let report = EvalReport::from_scores(&scored)?;
    prepare_dir(&a.out, a.force, false)?;
    write_json(
        &a.out.join(EVAL_REPORT_FILE),
        &EvalArtifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            split: split.as_str(),
            source,
            config,
            report: &report,
        },
    )?;
    write_scores_csv(&a.out.join(SCORES_FILE), &scored)?;
    write_roc_csv(&a.out.join(ROC_FILE), &report.roc)
}

#[derive(Serialize)]
struct SearchArtifact<'a, T: Serialize> {
    format_version: u32,
    config: String,
    report: &'a T,
}

pub fn cmd_search(a: &SearchArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let raw = load_dataset(&a.manifest)?;
    let normals: Vec<&Sample> = raw.split(Split::Train).collect();
    let pool: Vec<&Sample> = raw.split(Split::ValPool).filter(|s| s.is_anomalous()).collect();
    let spec = ValidationSpec {
        n_anomaly_types: cfg.search.n_types,
        n_examples: cfg.search.n_examples,
        seed: cfg.search.validation_seed,
    };
    let ids = build_validation_set(pool.iter().copied(), &spec)?;
    check_disjoint("validation and test", &ids, raw.split(Split::Test).map(|s| &s.id))?;
    let validation: Vec<&Sample> = ids.iter().filter_map(|id| raw.get(id)).collect();
    prepare_dir(&a.out, a.force, a.resume)?;
    let log = a.out.join(TRIALS_LOG_FILE);
    if a.force && !a.resume && log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_text())?;
    let report = cross_validate(&cfg.search_space(), &normals, &validation, &cfg.search_settings(), Some(&log))?;
    write_json(
        &a.out.join(SEARCH_REPORT_FILE),
        &SearchArtifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            config: cfg.to_text(),
            report: &report,
        },
    )
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let raw = load_dataset(&a.manifest)?;
    prepare_dir(&a.out, a.force, false)?;
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_text())?;
    let report = sensitivity_sweep(&cfg.search_space(), &raw.samples, &cfg.search_settings(), &cfg.sweep)?;
    write_text(&a.out.join(SWEEP_CSV_FILE), &report.to_csv()?)?;
    write_json(
        &a.out.join(SWEEP_REPORT_FILE),
        &SearchArtifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            config: cfg.to_text(),
            report: &report,
        },
    )
}

#[derive(Serialize)]
struct SynthArtifact<'a> {
    format_version: u32,
    spec: &'a SynthSpec,
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        resolution: a.resolution,
        n_train: a.n_train,
        n_test_normal: a.n_test_normal,
        n_test_anomalous: a.n_test_anomalous,
        n_val_pool: a.n_val_pool,
        subtlety: a.subtlety,
        ..SynthSpec::default()
    };
    spec.validate()?;
    prepare_dir(&a.out, a.force, false)?;
    crate::data::write_synthetic(&a.out, &spec)?;
    write_json(
        &a.out.join("synth.json"),
        &SynthArtifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            spec: &spec,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_classes() {
        let cfg = Error::Config {
            key: "k".into(),
            message: "m".into(),
        };
        assert_eq!(exit_code(&cfg), 2);
        assert_eq!(exit_code(&Error::EmptyDataset("x".into())), 3);
        assert_eq!(
            exit_code(&Error::NonFinite {
                step: 1,
                level: 0,
                alpha: 1.0
            }),
            4
        );
        assert_eq!(exit_code(&Error::Exists(PathBuf::from("x"))), 1);
        let rec: serde_json::Value = serde_json::from_str(&error_record(&cfg)).unwrap();
        assert_eq!(rec["key"], "k");
        assert_eq!(rec["error"], "config");
    }

    #[test]
    fn synth_rejects_non_power_of_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let code = run(["dpa", "synth", "--out", out.to_str().unwrap(), "--resolution", "17"]);
        assert_eq!(code, 2);
        assert!(!out.exists());
    }
}

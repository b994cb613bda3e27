//! End-to-end experiment: dataset (cached by content digest), baseline
//! training, two-phase composite training, gated inference on the test
//! split and the Monte-Carlo report.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::stored_digest;
use crate::dataset::{generate_dataset, load_dataset, persist_dataset, DatasetBundle, DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, monte_carlo_aggregate, ReportFormat, RunRecords, RunReport};
use crate::flops::model_flops;
use crate::inference::{evaluate_baseline, evaluate_dataset, write_records};
use crate::models::{
    build_baseline, build_composite, save_checkpoint, AnyModel, Checkpoint, CompositeSpec, TrainingMeta,
};
use crate::training::{train_model, two_phase_train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Dataset,
    Baseline,
    Composite,
    Inference,
    Report,
}

impl Stage {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Dataset => "dataset",
            Stage::Baseline => "baseline training",
            Stage::Composite => "composite training",
            Stage::Inference => "inference",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} ({})", self.index(), self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Paths are resolved against the directory holding the pipeline file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset_config: PathBuf,
    pub train_config: PathBuf,
    pub model_config: PathBuf,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/dataset`.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// A pipeline description with every referenced file parsed.
#[derive(Debug, Clone)]
pub struct ResolvedPipeline {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub model: CompositeSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset_dir: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> std::result::Result<ResolvedPipeline, StageError> {
        let cfg: PipelineConfig = read_json(path).at(Stage::Config)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base)
    }

    pub fn resolve(&self, base: &Path) -> std::result::Result<ResolvedPipeline, StageError> {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let dataset: DatasetConfig = read_json(&abs(&self.dataset_config)).at(Stage::Config)?;
        dataset.validate().at(Stage::Config)?;
        let train: TrainConfig = read_json(&abs(&self.train_config)).at(Stage::Config)?;
        train.validate().at(Stage::Config)?;
        let model: CompositeSpec = read_json(&abs(&self.model_config)).at(Stage::Config)?;
        model.validate().at(Stage::Config)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into())).at(Stage::Config);
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seed list has duplicates".into())).at(Stage::Config);
        }
        if dataset.frame_len < model.model_input_len * train.train_windows_per_frame {
            return Err(Error::Config(format!(
                "frames hold {} samples, too few for {} training windows of {}",
                dataset.frame_len, train.train_windows_per_frame, model.model_input_len
            )))
            .at(Stage::Config);
        }
        let output_dir = abs(&self.output_dir);
        let dataset_dir = self.dataset_dir.as_deref().map(abs).unwrap_or_else(|| output_dir.join("dataset"));
        Ok(ResolvedPipeline { dataset, train, model, seeds: self.seeds.clone(), output_dir, dataset_dir })
    }
}

/// Loads the dataset from `dir` when its stored digest matches `cfg`,
/// otherwise generates and persists it. Returns whether it was reused.
pub fn ensure_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<(DatasetBundle, bool)> {
    if stored_digest(dir).as_deref() == Some(cfg.digest().as_str()) {
        log::info!("reusing dataset in {}", dir.display());
        return Ok((load_dataset(dir)?, true));
    }
    log::info!("generating {} frames into {}", cfg.num_frames(), dir.display());
    let bundle = generate_dataset(cfg)?;
    persist_dataset(&bundle, dir)?;
    Ok((bundle, false))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunStamp {
    config_digest: String,
    seed: u64,
    baseline_epochs: usize,
    composite_epochs: Vec<usize>,
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("pipeline types serialise");
    s.push('\n');
    write_text(path, &s)
}

/// Trains and evaluates both models for one seed, writing the run's
/// checkpoints, histories and records under `dir`.
pub fn run_seed(
    p: &ResolvedPipeline,
    data: &DatasetBundle,
    seed: u64,
    dir: &Path,
) -> std::result::Result<RunRecords, StageError> {
    let io = |e: std::io::Error| Error::io(dir, e);
    fs::create_dir_all(dir).map_err(io).at(Stage::Baseline)?;
    let len = p.model.model_input_len;
    let digest = data.config.digest();
    let train =
        data.windowed_samples(Split::Train, len, p.train.train_windows_per_frame).at(Stage::Baseline)?;
    let val = data.samples(Split::Val, 0, len).at(Stage::Baseline)?;
    let test = data.samples(Split::Test, 0, len).at(Stage::Inference)?;
    let cfg = TrainConfig { seed, ..p.train.clone() };

    let base_spec = p.model.baseline_spec();
    let mut baseline = build_baseline(&base_spec, seed).at(Stage::Baseline)?;
    let tr: Vec<_> = train.iter().collect();
    let va: Vec<_> = val.iter().collect();
    let base_hist = train_model(&mut baseline, &tr, &va, &cfg).at(Stage::Baseline)?;
    write_text(&dir.join("baseline_history.csv"), &base_hist.to_csv()).at(Stage::Baseline)?;

    let mut composite = build_composite(&p.model, seed).at(Stage::Composite)?;
    let report = two_phase_train(&mut composite, &train, &val, &cfg).at(Stage::Composite)?;
    write_text(&dir.join("composite_joint_history.csv"), &report.joint.to_csv()).at(Stage::Composite)?;
    for step in &report.steps {
        write_text(&dir.join(format!("composite_expert{}_history.csv", step.expert)), &step.history.to_csv())
            .at(Stage::Composite)?;
    }
    write_json(&dir.join("training_report.json"), &report).at(Stage::Composite)?;
    let criteria = report.criteria();

    let base_records = evaluate_baseline(&baseline, &test).at(Stage::Inference)?;
    let comp_records = evaluate_dataset(&composite, &criteria, &test).at(Stage::Inference)?;
    write_records(&base_records, &dir.join("baseline_records.csv")).at(Stage::Inference)?;
    write_records(&comp_records, &dir.join("composite_records.csv")).at(Stage::Inference)?;

    let base_ckpt = Checkpoint {
        model: AnyModel::Baseline(baseline),
        criteria: Vec::new(),
        meta: TrainingMeta {
            epochs: base_hist.epochs.len(),
            seed,
            phase: format!("baseline dataset={digest}"),
        },
    };
    save_checkpoint(&base_ckpt, &dir.join("baseline.ckpt")).at(Stage::Baseline)?;
    let comp_ckpt = Checkpoint {
        model: AnyModel::Composite(composite),
        criteria: criteria.clone(),
        meta: TrainingMeta {
            epochs: report.joint.epochs.len(),
            seed,
            phase: format!("two-phase dataset={digest}"),
        },
    };
    save_checkpoint(&comp_ckpt, &dir.join("composite.ckpt")).at(Stage::Composite)?;
    let stamp = RunStamp {
        config_digest: digest,
        seed,
        baseline_epochs: base_hist.epochs.len(),
        composite_epochs: std::iter::once(report.joint.epochs.len())
            .chain(report.steps.iter().map(|s| s.history.epochs.len()))
            .collect(),
    };
    write_json(&dir.join("run.json"), &stamp).at(Stage::Report)?;

    Ok(RunRecords {
        seed,
        composite: comp_records,
        baseline: base_records,
        baseline_flops: model_flops(&base_spec).at(Stage::Inference)?.total,
        criteria,
    })
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: RunReport,
    pub dataset_reused: bool,
    pub report_files: Vec<PathBuf>,
}

pub fn run_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("run-seed{seed}"))
}

/// Runs every seed (in parallel, each with its own state) and writes the
/// aggregated report to `<output_dir>/report`.
pub fn run_pipeline(p: &ResolvedPipeline) -> std::result::Result<PipelineOutcome, StageError> {
    let (data, reused) = ensure_dataset(&p.dataset, &p.dataset_dir).at(Stage::Dataset)?;
    let runs: Vec<RunRecords> = p
        .seeds
        .par_iter()
        .map(|&seed| {
            run_seed(p, &data, seed, &run_dir(&p.output_dir, seed)).map_err(|e| StageError {
                stage: e.stage,
                source: Error::Training(format!("run with seed {seed}: {}", e.source)),
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    let report = monte_carlo_aggregate(&data.config.digest(), &runs).at(Stage::Report)?;
    let report_files = emit_report(
        &report,
        &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotData],
        &p.output_dir.join("report"),
    )
    .at(Stage::Report)?;
    Ok(PipelineOutcome { report, dataset_reused: reused, report_files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_config_names_the_path() {
        let err = PipelineConfig::load(Path::new("/nonexistent/pipeline.json")).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        let msg = err.to_string();
        assert!(msg.starts_with("stage 0"), "{msg}");
        assert!(msg.contains("/nonexistent/pipeline.json"), "{msg}");
    }

    #[test]
    fn missing_referenced_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            dataset_config: "nope.json".into(),
            train_config: "train.json".into(),
            model_config: "model.json".into(),
            seeds: vec![1],
            output_dir: "out".into(),
            dataset_dir: None,
        };
        let err = cfg.resolve(dir.path()).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        assert!(err.to_string().contains("nope.json"));
    }

    #[test]
    fn dataset_cache_reuses_matching_digest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DatasetConfig::desk();
        cfg.modulations.truncate(2);
        cfg.snr_grid_db = vec![0.0];
        cfg.frames_per_pair = 4;
        cfg.split_counts = crate::dataset::SplitCounts { train: 2, val: 1, test: 1 };
        let (a, reused) = ensure_dataset(&cfg, dir.path()).unwrap();
        assert!(!reused);
        let (b, reused) = ensure_dataset(&cfg, dir.path()).unwrap();
        assert!(reused);
        assert_eq!(a.frames, b.frames);
        cfg.master_seed += 1;
        assert!(!ensure_dataset(&cfg, dir.path()).unwrap().1);
    }
}

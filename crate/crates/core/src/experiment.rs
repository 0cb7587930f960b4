//! End-to-end runs: load, split, build, train, evaluate, persist.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! out/
//!   experiment.cfg        configuration used, re-parseable
//!   manifest.json         split counts
//!   runs/<run_id>.json    run records
//!   models/<run_id>.json  trained models
//!   plots/                training curves
//! ```
//!
//! The dataset split uses the experiment seed and is shared by all
//! repetitions; repetition `i` trains with seed `seed + i`.

use std::path::{Path, PathBuf};

use chrono::Utc;

use crate::config::ExperimentConfig;
use crate::dataset::{load_directory, stratified_split, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{build_classifier_from, lookup, weights_dir, ClassifierModel};
use crate::training::{
    evaluate, extract_features, grid_search, make_run_id, train_on_features, write_grid_csv, GridResult,
    LabeledFeatures, RunRecord, TrainingConfig,
};
use crate::viz::plot_traces;

/// Paths of an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn model_path(&self, run_id: &str) -> PathBuf {
        self.models_dir().join(format!("{run_id}.json"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("experiment.cfg")
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let root = cfg
        .dataset_root
        .as_deref()
        .ok_or_else(|| Error::param("dataset_root is not set"))?;
    let ds = load_directory(root, cfg.image_size)?;
    for e in &ds.errors {
        log::warn!("unreadable image {}: {}", e.path.display(), e.message);
    }
    Ok(ds)
}

pub fn split_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Split, DatasetManifest)> {
    let split = stratified_split(&ds.samples, cfg.split_ratio, cfg.seed)?;
    let manifest = DatasetManifest::new(ds.class_names.clone(), &split, cfg.split_ratio, cfg.seed);
    Ok((split, manifest))
}

/// Backbone features of both splits, computed once for a given model.
pub struct PreparedSplit {
    pub train: LabeledFeatures,
    pub test: LabeledFeatures,
}

pub fn prepare(model: &ClassifierModel, split: &Split) -> Result<PreparedSplit> {
    if split.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if split.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    Ok(PreparedSplit {
        train: extract_features(model, &split.train)?,
        test: extract_features(model, &split.test)?,
    })
}

pub fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<ClassifierModel> {
    let dir = cfg.weights_dir.clone().unwrap_or_else(weights_dir);
    build_classifier_from(&lookup(cfg.backbone.as_str())?, cfg.head_widths, seed, &dir)
}

/// One trained model and its record (not yet written).
pub struct TrainedRun {
    pub model: ClassifierModel,
    pub record: RunRecord,
}

/// Trains a fresh head with `seed` and evaluates it on both splits.
pub fn train_run(
    cfg: &ExperimentConfig,
    class_names: &[String; 2],
    base: ClassifierModel,
    data: &PreparedSplit,
    training: &TrainingConfig,
) -> Result<TrainedRun> {
    let started = Utc::now();
    let (model, trace) = train_on_features(base, &data.train, &data.test, training)?;
    let metrics = |set: &LabeledFeatures| -> Result<MetricReport> {
        evaluate(&model, set, cfg.positive_class, cfg.averaging)
    };
    let train_metrics = metrics(&data.train)?;
    let test_metrics = metrics(&data.test)?;
    let finished = Utc::now();
    let dataset_id = cfg.dataset_id();
    let record = RunRecord {
        run_id: make_run_id(cfg.backbone, &dataset_id, training.seed, started),
        dataset_id,
        backbone: cfg.backbone,
        class_names: class_names.clone(),
        positive_class: cfg.positive_class,
        config: training.clone(),
        trace,
        train_metrics,
        test_metrics,
        started,
        finished,
    };
    record.check_consistency()?;
    Ok(TrainedRun { model, record })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistedRun {
    pub record: RunRecord,
    pub record_path: PathBuf,
    pub model_path: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub fn persist_run(ws: &Workspace, run: &TrainedRun) -> Result<PersistedRun> {
    let record_path = run.record.save(&ws.runs_dir())?;
    let models = ws.models_dir();
    std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
    let model_path = ws.model_path(&run.record.run_id);
    run.model.save(&model_path)?;
    let plots = plot_traces(
        &[(run.record.backbone.as_str(), &run.record.trace)],
        &run.record.run_id,
        &ws.plots_dir(),
    )?;
    Ok(PersistedRun {
        record: run.record.clone(),
        record_path,
        model_path,
        plots,
    })
}

fn write_setup(ws: &Workspace, cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(&ws.root).map_err(|e| Error::io(&ws.root, e))?;
    manifest.save(&ws.manifest_path())?;
    let path = ws.config_path();
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

/// Trains `cfg.repeats` runs on one split and writes all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PersistedRun>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let (split, manifest) = split_dataset(cfg, &ds)?;
    let ws = Workspace::new(&cfg.output_dir);
    write_setup(&ws, cfg, &manifest)?;
    let mut out = Vec::with_capacity(cfg.repeats);
    // The backbone is fixed by the experiment seed, so features are shared across repeats.
    let backbone_model = build_model(cfg, cfg.seed)?;
    let data = prepare(&backbone_model, &split)?;
    for i in 0..cfg.repeats as u64 {
        let seed = cfg.seed + i;
        let mut base = backbone_model.clone();
        base.head = build_model(cfg, seed)?.head;
        let training = TrainingConfig {
            seed,
            ..cfg.training.clone()
        };
        let run = train_run(cfg, &ds.class_names, base, &data, &training)?;
        log::info!(
            "{}: test accuracy {:.4}",
            run.record.run_id,
            run.record.test_metrics.accuracy
        );
        out.push(persist_run(&ws, &run)?);
    }
    Ok(out)
}

/// Grid search scored by final-epoch accuracy on the held-out split.
pub fn run_grid_search(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let grid = cfg.grid.clone().unwrap_or_else(crate::training::GridSpec::standard);
    let ds = load_dataset(cfg)?;
    let (split, manifest) = split_dataset(cfg, &ds)?;
    let ws = Workspace::new(&cfg.output_dir);
    write_setup(&ws, cfg, &manifest)?;
    let model = build_model(cfg, cfg.seed)?;
    let data = prepare(&model, &split)?;
    let result = grid_search(&grid, &cfg.training, |c| {
        let (_, trace) = train_on_features(model.clone(), &data.train, &data.test, c)?;
        Ok(*trace.val_accuracy.last().expect("at least one epoch"))
    })?;
    write_grid_csv(&ws.root.join("grid_search.csv"), &result.table)?;
    Ok(result)
}

/// Loads `models/<run_id>.json` from a workspace, or a model file path directly.
pub fn load_model(ws: &Workspace, run_id_or_path: &str) -> Result<ClassifierModel> {
    let direct = Path::new(run_id_or_path);
    if direct.extension().is_some_and(|e| e == "json") && direct.exists() {
        return ClassifierModel::load(direct);
    }
    ClassifierModel::load(&ws.model_path(run_id_or_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{solid_intensity, write_image_dir, SOLID_CLASSES};

    fn setup(dir: &Path) -> ExperimentConfig {
        let data = dir.join("solid");
        write_image_dir(&data, SOLID_CLASSES, &solid_intensity(10, 16, 0).unwrap()).unwrap();
        let mut cfg = ExperimentConfig {
            dataset_root: Some(data),
            output_dir: dir.join("out"),
            image_size: (16, 16),
            head_widths: crate::model::HeadWidths(16, 8),
            ..Default::default()
        };
        cfg.training.epochs = 10;
        cfg
    }

    #[test]
    fn experiment_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let runs = run_experiment(&cfg).unwrap();
        assert_eq!(runs.len(), 2);
        let ws = Workspace::new(&cfg.output_dir);
        assert!(ws.manifest_path().exists());
        assert_eq!(ExperimentConfig::from_file(&ws.config_path()).unwrap(), cfg);
        for r in &runs {
            assert!(r.record_path.exists());
            assert_eq!(r.plots.len(), 2);
            assert_eq!(r.record.dataset_id, "solid");
            let model = load_model(&ws, &r.record.run_id).unwrap();
            assert_eq!(model.backbone_checksum(), build_model(&cfg, cfg.seed).unwrap().backbone_checksum());
        }
        assert_ne!(runs[0].record.config.seed, runs[1].record.config.seed);
    }

    #[test]
    fn grid_search_writes_table() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = setup(dir.path());
        cfg.set("grid_learning_rates", "0.001, 0.01").unwrap();
        cfg.set("grid_epochs", "2").unwrap();
        cfg.set("grid_batch_sizes", "5").unwrap();
        let r = run_grid_search(&cfg).unwrap();
        assert_eq!(r.table.len(), 2);
        assert!(cfg.output_dir.join("grid_search.csv").exists());
    }

    #[test]
    fn missing_root_is_an_error() {
        assert!(run_experiment(&ExperimentConfig::default()).is_err());
    }
}

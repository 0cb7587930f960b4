//! Head training with Adam, hyperparameter grid search, and run records.
//!
//! Backbone features are computed once per sample before the first epoch;
//! only the dense head is optimised. The validation curves in an
//! [`EpochTrace`] are computed on whatever split the caller passes as
//! `val_set`. The pipeline passes the held-out test split there, which
//! mirrors the reference experiments but means the "validation" curve is not
//! an independent estimate.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, confusion, AveragingMode, MetricReport};
use crate::model::{nll, BackboneName, ClassifierModel};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;

/// Number of repetitions averaged per reported result.
pub const DEFAULT_REPEATS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 30,
            batch_size: 5,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::param(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

/// Per-epoch accuracy and loss on the training and validation splits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub train_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl EpochTrace {
    pub fn len(&self) -> usize {
        self.train_accuracy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_accuracy.is_empty()
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.len();
        if [self.train_loss.len(), self.val_accuracy.len(), self.val_loss.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err("trace arrays differ in length".into());
        }
        let acc_ok = |v: &[f64]| v.iter().all(|a| (0.0..=1.0).contains(a));
        let loss_ok = |v: &[f64]| v.iter().all(|l| *l >= 0.0 && l.is_finite());
        if !acc_ok(&self.train_accuracy) || !acc_ok(&self.val_accuracy) {
            return Err("accuracy outside [0,1]".into());
        }
        if !loss_ok(&self.train_loss) || !loss_ok(&self.val_loss) {
            return Err("negative or non-finite loss".into());
        }
        Ok(())
    }

    /// Population variance of the validation loss across epochs.
    pub fn val_loss_variance(&self) -> f64 {
        let n = self.val_loss.len();
        if n == 0 {
            return 0.0;
        }
        let mean = self.val_loss.iter().sum::<f64>() / n as f64;
        self.val_loss.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64
    }
}

/// Pooled backbone features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Preprocesses `samples` for the model's backbone and runs the frozen backbone once.
pub fn extract_features(model: &ClassifierModel, samples: &[ImageSample]) -> Result<LabeledFeatures> {
    let features = samples
        .par_iter()
        .map(|s| model.features(&preprocess(&s.image, &model.spec)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledFeatures {
        features,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

fn argmax2(p: &[f64]) -> usize {
    usize::from(p[1] > p[0])
}

/// Predicted labels and mean cross-entropy on a feature set.
pub fn predict_and_loss(model: &ClassifierModel, data: &LabeledFeatures) -> (Vec<usize>, f64) {
    let outs: Vec<(usize, f64)> = data
        .features
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &y)| {
            let p = model.head.forward(x).probs;
            (argmax2(&p), nll(p[y]))
        })
        .collect();
    let loss = outs.iter().map(|o| o.1).sum::<f64>() / outs.len().max(1) as f64;
    (outs.into_iter().map(|o| o.0).collect(), loss)
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Confusion-matrix metrics of the model on a feature set.
pub fn evaluate(
    model: &ClassifierModel,
    data: &LabeledFeatures,
    positive_class: usize,
    mode: AveragingMode,
) -> Result<MetricReport> {
    let (preds, _) = predict_and_loss(model, data);
    compute_metrics(&confusion(&preds, &data.labels, positive_class)?, mode)
}

/// Trains the head on raw samples. See [`train_on_features`].
pub fn train(
    model: ClassifierModel,
    train_set: &[ImageSample],
    val_set: &[ImageSample],
    config: &TrainingConfig,
) -> Result<(ClassifierModel, EpochTrace)> {
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    config.validate()?;
    let train_f = extract_features(&model, train_set)?;
    let val_f = extract_features(&model, val_set)?;
    train_on_features(model, &train_f, &val_f, config)
}

/// Runs exactly `config.epochs` epochs of shuffled mini-batch Adam on the head.
pub fn train_on_features(
    mut model: ClassifierModel,
    train_set: &LabeledFeatures,
    val_set: &LabeledFeatures,
    config: &TrainingConfig,
) -> Result<(ClassifierModel, EpochTrace)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = model.head.flat_params();
    let mut adam = Adam::new(config.learning_rate, params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = EpochTrace::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| train_set.features[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads) = model.head.loss_and_grad(&xs, &ys);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            adam.step(&mut params, &grads.flat_params());
            model.head.set_flat_params(&params);
        }
        let (train_pred, train_loss) = predict_and_loss(&model, train_set);
        let (val_pred, val_loss) = predict_and_loss(&model, val_set);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.train_accuracy.push(accuracy(&train_pred, &train_set.labels));
        trace.train_loss.push(train_loss);
        trace.val_accuracy.push(accuracy(&val_pred, &val_set.labels));
        trace.val_loss.push(val_loss);
        log::debug!(
            "epoch {epoch}/{}: loss {train_loss:.4} acc {:.3} val_loss {val_loss:.4} val_acc {:.3}",
            config.epochs,
            trace.train_accuracy[epoch - 1],
            trace.val_accuracy[epoch - 1]
        );
    }
    Ok((model, trace))
}

/// Candidate values for each searched hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_sizes: Vec<usize>,
}

impl GridSpec {
    /// The 3 × 5 × 4 grid of the reference experiments.
    pub fn standard() -> Self {
        Self {
            learning_rates: vec![0.001, 0.01, 0.1],
            epochs: vec![10, 20, 30, 40, 50],
            batch_sizes: vec![5, 10, 15, 20],
        }
    }

    pub fn len(&self) -> usize {
        self.learning_rates.len() * self.epochs.len() * self.batch_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination, learning rate outermost, each derived from `base`.
    pub fn configs(&self, base: &TrainingConfig) -> Vec<TrainingConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &learning_rate in &self.learning_rates {
            for &epochs in &self.epochs {
                for &batch_size in &self.batch_sizes {
                    out.push(TrainingConfig {
                        learning_rate,
                        epochs,
                        batch_size,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: TrainingConfig,
    pub table: Vec<GridCell>,
}

/// Scores every grid combination once and returns the best.
///
/// Ties on score go to the lower learning rate, then fewer epochs, then the
/// smaller batch. Cells are evaluated in parallel; the table is in
/// [`GridSpec::configs`] order.
pub fn grid_search<F>(grids: &GridSpec, base: &TrainingConfig, evaluate: F) -> Result<GridResult>
where
    F: Fn(&TrainingConfig) -> Result<f64> + Sync,
{
    if grids.learning_rates.is_empty() || grids.epochs.is_empty() || grids.batch_sizes.is_empty() {
        return Err(Error::Empty("grid list"));
    }
    let configs = grids.configs(base);
    for c in &configs {
        c.validate()?;
    }
    let scores = configs
        .par_iter()
        .map(|c| {
            let s = evaluate(c)?;
            if s.is_nan() {
                return Err(Error::param(format!(
                    "evaluation returned NaN for lr {} epochs {} batch {}",
                    c.learning_rate, c.epochs, c.batch_size
                )));
            }
            Ok(s)
        })
        .collect::<Result<Vec<f64>>>()?;

    let better = |a: usize, b: usize| {
        let (ca, cb) = (&configs[a], &configs[b]);
        scores[a]
            .total_cmp(&scores[b])
            .then(cb.learning_rate.total_cmp(&ca.learning_rate))
            .then(cb.epochs.cmp(&ca.epochs))
            .then(cb.batch_size.cmp(&ca.batch_size))
    };
    let best = (0..configs.len())
        .max_by(|&a, &b| better(a, b))
        .expect("grid is non-empty");
    let table = configs
        .iter()
        .zip(&scores)
        .map(|(c, &s)| GridCell {
            lr: c.learning_rate,
            epochs: c.epochs,
            batch: c.batch_size,
            val_accuracy: s,
        })
        .collect();
    Ok(GridResult {
        best: configs[best].clone(),
        table,
    })
}

pub fn write_grid_csv(path: &Path, table: &[GridCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for cell in table {
        w.serialize(cell)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Structural(format!("{}: {other:?}", path.display())),
    }
}

/// Everything needed to report and reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub dataset_id: String,
    pub backbone: BackboneName,
    pub class_names: [String; 2],
    pub positive_class: usize,
    pub config: TrainingConfig,
    pub trace: EpochTrace,
    pub train_metrics: MetricReport,
    pub test_metrics: MetricReport,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
}

impl RunRecord {
    /// Checks that stored metrics match their confusion matrices and the trace is well formed.
    pub fn check_consistency(&self) -> Result<()> {
        for (split, m) in [("train", &self.train_metrics), ("test", &self.test_metrics)] {
            let recomputed = compute_metrics(&m.confusion, m.averaging_mode)?;
            if (recomputed.accuracy - m.accuracy).abs() > 1e-9 {
                return Err(Error::Structural(format!(
                    "run {}: stored {split} accuracy {} differs from its confusion matrix ({})",
                    self.run_id, m.accuracy, recomputed.accuracy
                )));
            }
        }
        self.trace
            .check_invariants()
            .map_err(|e| Error::Structural(format!("run {}: {e}", self.run_id)))?;
        if self.trace.len() != self.config.epochs {
            return Err(Error::Structural(format!(
                "run {}: trace has {} epochs, config says {}",
                self.run_id,
                self.trace.len(),
                self.config.epochs
            )));
        }
        Ok(())
    }

    pub fn path_in(&self, runs_dir: &Path) -> PathBuf {
        runs_dir.join(format!("{}.json", self.run_id))
    }

    /// Writes `<runs_dir>/<run_id>.json`, creating the directory if needed.
    pub fn save(&self, runs_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
        let path = self.path_in(runs_dir);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: RunRecord = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        record.check_consistency().map_err(|e| Error::CorruptRecord {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(record)
    }
}

/// A run id that sorts by start time: `<backbone>-<dataset>-s<seed>-<YYYYmmddTHHMMSS>`.
pub fn make_run_id(backbone: BackboneName, dataset_id: &str, seed: u64, started: DateTime<Utc>) -> String {
    let dataset: String = dataset_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    format!(
        "{}-{}-s{}-{}",
        backbone.as_str().to_ascii_lowercase(),
        dataset,
        seed,
        started.format("%Y%m%dT%H%M%S%3f")
    )
}

/// Arithmetic means of metric reports from repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub runs: usize,
}

impl AveragedMetrics {
    pub fn mean<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Result<Self> {
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        for r in reports {
            acc[0] += r.accuracy;
            acc[1] += r.precision;
            acc[2] += r.recall;
            acc[3] += r.f1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("metric reports"));
        }
        let k = n as f64;
        Ok(Self {
            accuracy: acc[0] / k,
            precision: acc[1] / k,
            recall: acc[2] / k,
            f1: acc[3] / k,
            runs: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedRun {
    pub train: AveragedMetrics,
    pub test: AveragedMetrics,
    pub records: Vec<RunRecord>,
}

/// Calls `runner` once per seed and averages the resulting metrics.
pub fn repeated_run<F>(n: usize, seeds: &[u64], mut runner: F) -> Result<RepeatedRun>
where
    F: FnMut(u64) -> Result<RunRecord>,
{
    if n == 0 {
        return Err(Error::param("need at least one run"));
    }
    if seeds.len() != n {
        return Err(Error::LengthMismatch {
            left: seeds.len(),
            right: n,
        });
    }
    let records = seeds.iter().map(|&s| runner(s)).collect::<Result<Vec<_>>>()?;
    Ok(RepeatedRun {
        train: AveragedMetrics::mean(records.iter().map(|r| &r.train_metrics))?,
        test: AveragedMetrics::mean(records.iter().map(|r| &r.test_metrics))?,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionMatrix;
    use crate::model::{build_classifier, lookup, HeadWidths};

    fn tiny_model(seed: u64) -> ClassifierModel {
        build_classifier(&lookup("TinyCNN").unwrap(), HeadWidths(16, 8), seed).unwrap()
    }

    /// Two well-separated Gaussian blobs in feature space.
    fn blobs(n: usize, dim: usize, seed: u64) -> LabeledFeatures {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 0 { -1.0 } else { 1.0 };
            features.push((0..dim).map(|_| centre + noise.sample(&mut rng)).collect());
            labels.push(y);
        }
        LabeledFeatures { features, labels }
    }

    #[test]
    fn default_config_and_validation() {
        let c = TrainingConfig::default();
        assert_eq!((c.learning_rate, c.epochs, c.batch_size), (0.001, 30, 5));
        assert_eq!(c.optimizer, Optimizer::Adam);
        for bad in [
            TrainingConfig { learning_rate: 0.0, ..c.clone() },
            TrainingConfig { epochs: 0, ..c.clone() },
            TrainingConfig { batch_size: 0, ..c.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut adam = Adam::new(0.1, 2);
        let mut p = [1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - (1.0 - 0.1 * 3.0 / (3.0 + ADAM_EPSILON))).abs() < 1e-15);
        assert!((p[1] - (-1.0 + 0.1 * 0.5 / (0.5 + ADAM_EPSILON))).abs() < 1e-15);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut adam = Adam::new(0.05, 1);
        let mut p = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 2.0)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn trains_separable_features() {
        let model = tiny_model(1);
        let data = blobs(40, 32, 2);
        let config = TrainingConfig {
            epochs: 10,
            ..Default::default()
        };
        let (trained, trace) = train_on_features(model, &data, &data, &config).unwrap();
        assert_eq!(trace.len(), 10);
        trace.check_invariants().unwrap();
        assert!(trace.train_accuracy[9] >= 0.99);
        assert!(trace.train_loss[9] < trace.train_loss[0]);
        let report = evaluate(&trained, &data, 0, AveragingMode::Weighted).unwrap();
        assert!(report.is_consistent());
    }

    #[test]
    fn single_epoch_trace_and_empty_splits() {
        let data = blobs(6, 32, 3);
        let config = TrainingConfig {
            epochs: 1,
            ..Default::default()
        };
        let (_, trace) = train_on_features(tiny_model(0), &data, &data, &config).unwrap();
        assert_eq!(trace.len(), 1);
        let empty = LabeledFeatures {
            features: vec![],
            labels: vec![],
        };
        assert!(matches!(
            train_on_features(tiny_model(0), &empty, &data, &config),
            Err(Error::Empty(_))
        ));
        assert!(train(tiny_model(0), &[], &[], &config).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_epoch() {
        let mut data = blobs(6, 32, 3);
        data.features[0][0] = f64::NAN;
        let err = train_on_features(tiny_model(0), &data, &data, &TrainingConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1 }), "{err:?}");
    }

    #[test]
    fn training_is_deterministic_and_leaves_backbone_alone() {
        let data = blobs(20, 32, 4);
        let config = TrainingConfig {
            epochs: 3,
            seed: 11,
            ..Default::default()
        };
        let model = tiny_model(5);
        let checksum = model.backbone_checksum();
        let head_before = model.head.clone();
        let (a, ta) = train_on_features(model.clone(), &data, &data, &config).unwrap();
        let (b, tb) = train_on_features(model, &data, &data, &config).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.head, b.head);
        assert_eq!(a.backbone_checksum(), checksum);
        assert_ne!(a.head, head_before);
    }

    #[test]
    fn head_gradient_matches_central_differences() {
        let model = tiny_model(9);
        let data = blobs(4, 32, 6);
        let (_, grads) = model.head.loss_and_grad(&data.features, &data.labels);
        let analytic = grads.flat_params();
        let params = model.head.flat_params();
        let mut head = model.head.clone();
        let h = 1e-6;
        // Every bias and a stride through the weights keeps the test fast.
        let indices: Vec<usize> = (0..params.len()).step_by(7).collect();
        let mut worst: f64 = 0.0;
        for i in indices {
            let mut p = params.clone();
            p[i] += h;
            head.set_flat_params(&p);
            let up = head.loss(&data.features, &data.labels);
            p[i] -= 2.0 * h;
            head.set_flat_params(&p);
            let down = head.loss(&data.features, &data.labels);
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((numeric - analytic[i]).abs() / scale);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn standard_grid_has_sixty_cells() {
        let g = GridSpec::standard();
        assert_eq!(g.len(), 60);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let r = grid_search(&g, &TrainingConfig::default(), |c| {
            calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            Ok(-(c.learning_rate - 0.01).abs())
        })
        .unwrap();
        assert_eq!(calls.into_inner(), 60);
        assert_eq!(r.table.len(), 60);
        assert_eq!(r.best.learning_rate, 0.01);
        // all epochs/batches tie for lr 0.01: smallest wins
        assert_eq!((r.best.epochs, r.best.batch_size), (10, 5));
    }

    #[test]
    fn grid_tie_break_prefers_lower_values() {
        let g = GridSpec {
            learning_rates: vec![0.1, 0.01],
            epochs: vec![20, 10],
            batch_sizes: vec![10, 5],
        };
        let r = grid_search(&g, &TrainingConfig::default(), |_| Ok(0.5)).unwrap();
        assert_eq!((r.best.learning_rate, r.best.epochs, r.best.batch_size), (0.01, 10, 5));
        let empty = GridSpec {
            epochs: vec![],
            ..GridSpec::standard()
        };
        assert!(grid_search(&empty, &TrainingConfig::default(), |_| Ok(0.0)).is_err());
    }

    #[test]
    fn grid_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        let table = vec![GridCell {
            lr: 0.001,
            epochs: 30,
            batch: 5,
            val_accuracy: 0.9,
        }];
        write_grid_csv(&path, &table).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "lr,epochs,batch,val_accuracy");
        assert_eq!(text.lines().nth(1).unwrap(), "0.001,30,5,0.9");
    }

    fn record(seed: u64, acc_hits: u64) -> RunRecord {
        let cm = ConfusionMatrix {
            tp: acc_hits / 2,
            tn: acc_hits - acc_hits / 2,
            fp: (100 - acc_hits) / 2,
            fn_: (100 - acc_hits) - (100 - acc_hits) / 2,
        };
        let m = compute_metrics(&cm, AveragingMode::Weighted).unwrap();
        let now = Utc::now();
        RunRecord {
            run_id: make_run_id(BackboneName::TinyCNN, "synthetic", seed, now),
            dataset_id: "synthetic".into(),
            backbone: BackboneName::TinyCNN,
            class_names: ["a".into(), "b".into()],
            positive_class: 0,
            config: TrainingConfig {
                epochs: 1,
                seed,
                ..Default::default()
            },
            trace: EpochTrace {
                train_accuracy: vec![0.5],
                train_loss: vec![0.7],
                val_accuracy: vec![0.5],
                val_loss: vec![0.7],
            },
            train_metrics: m.clone(),
            test_metrics: m,
            started: now,
            finished: now,
        }
    }

    #[test]
    fn repeated_run_means() {
        let one = repeated_run(1, &[3], |s| Ok(record(s, 88))).unwrap();
        assert_eq!(one.test.accuracy, one.records[0].test_metrics.accuracy);
        let two = repeated_run(2, &[1, 2], |s| Ok(record(s, if s == 1 { 88 } else { 92 }))).unwrap();
        assert!((two.test.accuracy - 0.90).abs() < 1e-12);
        assert_eq!(two.records.len(), 2);
        assert!(repeated_run(2, &[1], |s| Ok(record(s, 50))).is_err());
        assert!(repeated_run(0, &[], |s| Ok(record(s, 50))).is_err());
    }

    #[test]
    fn run_record_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let r = record(4, 72);
        let path = r.save(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap().to_str().unwrap(), format!("{}.json", r.run_id));
        assert_eq!(RunRecord::load(&path).unwrap(), r);

        let mut bad = r.clone();
        bad.test_metrics.accuracy = 0.5;
        let bad_path = dir.path().join("bad.json");
        std::fs::write(&bad_path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(RunRecord::load(&bad_path), Err(Error::CorruptRecord { .. })));
        std::fs::write(&bad_path, "{not json").unwrap();
        assert!(matches!(RunRecord::load(&bad_path), Err(Error::CorruptRecord { .. })));
    }
}

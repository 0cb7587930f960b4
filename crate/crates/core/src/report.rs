//! Report tables built from persisted run records.
//!
//! Every number is recomputed from the confusion matrices stored in the
//! records. Runs sharing a dataset and backbone are repetitions and are
//! averaged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confidence::{interval_table, write_interval_csv, IntervalInput, IntervalRow};
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, compute_metrics, cross_dataset_average, MetricReport};
use crate::model::BackboneName;
use crate::training::RunRecord;

pub const METRIC_HEADERS: [&str; 5] = ["Model", "Accuracy", "Precision", "Recall", "F1-Score"];

/// Loads every `*.json` record in `dir`, skipping unreadable ones with a warning.
pub fn load_runs(dir: &Path) -> Result<(Vec<RunRecord>, Vec<String>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for path in paths {
        match RunRecord::load(&path) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                warnings.push(format!("skipped {}: {e}", path.display()));
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Empty("run directory (no readable run records)"));
    }
    Ok((records, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn of(self, r: &RunRecord) -> &MetricReport {
        match self {
            Split::Train => &r.train_metrics,
            Split::Test => &r.test_metrics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub study: String,
    pub model: BackboneName,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub runs: usize,
}

/// Records grouped by `(dataset, backbone)`, in dataset then registry order.
pub fn group_runs(records: &[RunRecord]) -> BTreeMap<(String, BackboneName), Vec<&RunRecord>> {
    let mut groups: BTreeMap<_, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.dataset_id.clone(), r.backbone)).or_default().push(r);
    }
    groups
}

fn recomputed(r: &RunRecord, split: Split) -> Result<MetricReport> {
    let m = split.of(r);
    compute_metrics(&m.confusion, m.averaging_mode)
}

/// Mean metrics per dataset and backbone for one split.
pub fn metric_table(records: &[RunRecord], split: Split) -> Result<Vec<MetricRow>> {
    group_runs(records)
        .into_iter()
        .map(|((study, model), runs)| {
            let reports = runs.iter().map(|r| recomputed(r, split)).collect::<Result<Vec<_>>>()?;
            let k = reports.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
            Ok(MetricRow {
                study,
                model,
                accuracy: mean(|m| m.accuracy),
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                f1: mean(|m| m.f1),
                runs: reports.len(),
            })
        })
        .collect()
}

/// Writes one dataset's rows with the `Model,Accuracy,Precision,Recall,F1-Score` columns.
pub fn write_metric_csv<W: std::io::Write>(rows: &[&MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_HEADERS)?;
    for r in rows {
        w.write_record([
            r.model.to_string(),
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.precision),
            format!("{:.4}", r.recall),
            format!("{:.4}", r.f1),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationRow {
    pub study: String,
    pub model: BackboneName,
    pub run_id: String,
    pub misclassified: u64,
    pub total: u64,
}

pub fn misclassification_table(records: &[RunRecord]) -> Vec<MisclassificationRow> {
    group_runs(records)
        .into_values()
        .flatten()
        .map(|r| MisclassificationRow {
            study: r.dataset_id.clone(),
            model: r.backbone,
            run_id: r.run_id.clone(),
            misclassified: r.test_metrics.confusion.misclassified(),
            total: r.test_metrics.confusion.total(),
        })
        .collect()
}

/// Interval rows per dataset and backbone. With repeated runs the success
/// count is the mean test accuracy times the test size, rounded.
pub fn confidence_table(records: &[RunRecord], alpha: f64) -> Result<Vec<IntervalRow>> {
    let inputs = group_runs(records)
        .into_iter()
        .map(|((study, model), runs)| {
            let n = runs[0].test_metrics.confusion.total();
            if runs.iter().any(|r| r.test_metrics.confusion.total() != n) {
                return Err(Error::Structural(format!(
                    "{model} on {study}: repeated runs have different test sizes"
                )));
            }
            let mean_correct =
                runs.iter().map(|r| r.test_metrics.confusion.correct() as f64).sum::<f64>() / runs.len() as f64;
            Ok(IntervalInput {
                study,
                model: model.to_string(),
                successes: mean_correct.round() as u64,
                n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    interval_table(&inputs, alpha)
}

/// Mean of train and test accuracy per backbone and dataset, with a final
/// row averaging each dataset column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageTable {
    pub studies: Vec<String>,
    pub rows: Vec<(BackboneName, Vec<Option<f64>>)>,
    pub column_means: Vec<Option<f64>>,
    /// Four-way train/test mean across exactly two datasets, per backbone.
    pub cross_dataset: Vec<(BackboneName, Option<f64>)>,
}

pub fn average_table(records: &[RunRecord]) -> Result<AverageTable> {
    let train = metric_table(records, Split::Train)?;
    let test = metric_table(records, Split::Test)?;
    let mut studies: Vec<String> = train.iter().map(|r| r.study.clone()).collect();
    studies.dedup();
    let mut models: Vec<BackboneName> = train.iter().map(|r| r.model).collect();
    models.sort();
    models.dedup();
    let lookup = |rows: &[MetricRow], s: &str, m: BackboneName| {
        rows.iter().find(|r| r.study == s && r.model == m).map(|r| r.accuracy)
    };
    let rows: Vec<(BackboneName, Vec<Option<f64>>)> = models
        .iter()
        .map(|&m| {
            let cells = studies
                .iter()
                .map(|s| Some(average_accuracy(lookup(&train, s, m)?, lookup(&test, s, m)?)))
                .collect();
            (m, cells)
        })
        .collect();
    let column_means = (0..studies.len())
        .map(|j| {
            let vals: Vec<f64> = rows.iter().filter_map(|(_, c)| c[j]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let cross_dataset = if studies.len() == 2 {
        models
            .iter()
            .map(|&m| {
                let v = (|| {
                    Some(cross_dataset_average([
                        lookup(&train, &studies[0], m)?,
                        lookup(&test, &studies[0], m)?,
                        lookup(&train, &studies[1], m)?,
                        lookup(&test, &studies[1], m)?,
                    ]))
                })();
                (m, v)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(AverageTable {
        studies,
        rows,
        column_means,
        cross_dataset,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{:.4}", v))
}

pub fn write_average_csv<W: std::io::Write>(table: &AverageTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let both = !table.cross_dataset.is_empty();
    let mut header = vec!["Model".to_string()];
    header.extend(table.studies.iter().cloned());
    if both {
        header.push("Both datasets".into());
    }
    w.write_record(&header)?;
    for (i, (model, cells)) in table.rows.iter().enumerate() {
        let mut rec = vec![model.to_string()];
        rec.extend(cells.iter().map(|&c| pct(c)));
        if both {
            rec.push(pct(table.cross_dataset[i].1));
        }
        w.write_record(&rec)?;
    }
    let mut rec = vec!["Average".to_string()];
    rec.extend(table.column_means.iter().map(|&c| pct(c)));
    if both {
        rec.push(String::new());
    }
    w.write_record(&rec)?;
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestModel {
    pub study: String,
    pub model: BackboneName,
    pub test_accuracy: f64,
    pub misclassified: f64,
    pub val_loss_variance: f64,
}

/// Per dataset, the backbone with the highest mean test accuracy; ties go
/// to fewer misclassifications, then to the steadier validation loss.
pub fn best_models(records: &[RunRecord]) -> Result<Vec<BestModel>> {
    let mut candidates: BTreeMap<String, Vec<BestModel>> = BTreeMap::new();
    for ((study, model), runs) in group_runs(records) {
        let k = runs.len() as f64;
        let mut acc = 0.0;
        for r in &runs {
            acc += recomputed(r, Split::Test)?.accuracy;
        }
        candidates.entry(study.clone()).or_default().push(BestModel {
            study,
            model,
            test_accuracy: acc / k,
            misclassified: runs.iter().map(|r| r.test_metrics.confusion.misclassified() as f64).sum::<f64>() / k,
            val_loss_variance: runs.iter().map(|r| r.trace.val_loss_variance()).sum::<f64>() / k,
        });
    }
    Ok(candidates
        .into_values()
        .filter_map(|c| {
            c.into_iter().min_by(|a, b| {
                b.test_accuracy
                    .total_cmp(&a.test_accuracy)
                    .then(a.misclassified.total_cmp(&b.misclassified))
                    .then(a.val_loss_variance.total_cmp(&b.val_loss_variance))
                    .then(a.model.cmp(&b.model))
            })
        })
        .collect())
}

/// Everything `generate_report` derives from a set of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub train: Vec<MetricRow>,
    pub test: Vec<MetricRow>,
    pub misclassifications: Vec<MisclassificationRow>,
    pub intervals: Vec<IntervalRow>,
    pub averages: AverageTable,
    pub best: Vec<BestModel>,
    pub warnings: Vec<String>,
}

pub fn generate_report(records: &[RunRecord], alpha: f64) -> Result<ReportBundle> {
    if records.is_empty() {
        return Err(Error::Empty("run records"));
    }
    Ok(ReportBundle {
        train: metric_table(records, Split::Train)?,
        test: metric_table(records, Split::Test)?,
        misclassifications: misclassification_table(records),
        intervals: confidence_table(records, alpha)?,
        averages: average_table(records)?,
        best: best_models(records)?,
        warnings: Vec::new(),
    })
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl ReportBundle {
    /// Rows of one split for one dataset.
    pub fn metric_rows(&self, split: Split, study: &str) -> Vec<&MetricRow> {
        let rows = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        rows.iter().filter(|r| r.study == study).collect()
    }

    /// Writes every table as CSV under `dir` and returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for split in [Split::Train, Split::Test] {
            for study in &self.averages.studies {
                let path = dir.join(format!("metrics_{}_{}.csv", split.name(), study));
                write_metric_csv(&self.metric_rows(split, study), create(&path)?)?;
                written.push(path);
            }
        }
        let path = dir.join("misclassifications.csv");
        write_csv_rows(&path, &self.misclassifications)?;
        written.push(path);
        let path = dir.join("confidence_intervals.csv");
        write_interval_csv(&self.intervals, create(&path)?)?;
        written.push(path);
        let path = dir.join("average_accuracy.csv");
        write_average_csv(&self.averages, create(&path)?)?;
        written.push(path);
        let path = dir.join("best_model.csv");
        write_csv_rows(&path, &self.best)?;
        written.push(path);
        Ok(written)
    }
}

//! Experiment configuration as a flat `key = value` file.
//!
//! ```text
//! # CT scan run
//! dataset_root = data/ct
//! backbone = NasNetMobile
//! epochs = 30
//! grid_learning_rates = 0.001, 0.01, 0.1
//! ```
//!
//! Blank lines and `#` comments are ignored, unknown keys are rejected, and
//! every key may also be set programmatically through [`ExperimentConfig::set`],
//! which is how command-line overrides are applied on top of a file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{DEFAULT_IMAGE_SIZE, DEFAULT_SPLIT_RATIO};
use crate::error::{Error, Result};
use crate::explain::{FillPolicy, LimeParams};
use crate::metrics::AveragingMode;
use crate::model::{BackboneName, HeadWidths};
use crate::segmentation::{ParentSearch, QuickShiftParams};
use crate::training::{GridSpec, TrainingConfig, DEFAULT_REPEATS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_root: Option<PathBuf>,
    pub dataset_id: Option<String>,
    pub backbone: BackboneName,
    pub image_size: (usize, usize),
    pub split_ratio: f64,
    pub head_widths: HeadWidths,
    pub training: TrainingConfig,
    pub grid: Option<GridSpec>,
    pub repeats: usize,
    pub positive_class: usize,
    pub averaging: AveragingMode,
    pub alpha: f64,
    pub quickshift: QuickShiftParams,
    pub lime: LimeParams,
    pub output_dir: PathBuf,
    /// Converted backbone weights; `None` falls back to the environment or `./weights`.
    pub weights_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            dataset_id: None,
            backbone: BackboneName::TinyCNN,
            image_size: DEFAULT_IMAGE_SIZE,
            split_ratio: DEFAULT_SPLIT_RATIO,
            head_widths: HeadWidths::default(),
            training: TrainingConfig::default(),
            grid: None,
            repeats: DEFAULT_REPEATS,
            positive_class: 0,
            averaging: AveragingMode::default(),
            alpha: 0.05,
            quickshift: QuickShiftParams::default(),
            lime: LimeParams::default(),
            output_dir: PathBuf::from("out"),
            weights_dir: None,
            seed: 0,
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "dataset_root",
    "dataset_id",
    "backbone",
    "image_height",
    "image_width",
    "split_ratio",
    "head_dense1",
    "head_dense2",
    "learning_rate",
    "epochs",
    "batch_size",
    "optimizer",
    "grid_learning_rates",
    "grid_epochs",
    "grid_batch_sizes",
    "repeats",
    "positive_class",
    "averaging",
    "alpha",
    "quickshift_kernel_size",
    "quickshift_max_dist",
    "quickshift_ratio",
    "quickshift_parent_search",
    "lime_samples",
    "lime_kernel_width",
    "lime_top_k",
    "lime_fill",
    "output_dir",
    "weights_dir",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<std::result::Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(format!("`{key}`: list is empty"));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.apply(key.trim(), value.trim()).map_err(|message| Error::Config {
                line: i + 1,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key as if it appeared in a file; reported as line 0 on error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply(key, value)
            .map_err(|message| Error::Config { line: 0, message })?;
        self.validate()
    }

    fn grid_mut(&mut self) -> &mut GridSpec {
        self.grid.get_or_insert_with(GridSpec::standard)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "dataset_id" => self.dataset_id = Some(value.to_string()),
            "backbone" => self.backbone = parse(key, value)?,
            "image_height" => self.image_size.0 = parse(key, value)?,
            "image_width" => self.image_size.1 = parse(key, value)?,
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "head_dense1" => self.head_widths.0 = parse(key, value)?,
            "head_dense2" => self.head_widths.1 = parse(key, value)?,
            "learning_rate" => self.training.learning_rate = parse(key, value)?,
            "epochs" => self.training.epochs = parse(key, value)?,
            "batch_size" => self.training.batch_size = parse(key, value)?,
            "optimizer" => {
                if !value.eq_ignore_ascii_case("adam") {
                    return Err(format!("`optimizer`: only `adam` is supported, got `{value}`"));
                }
            }
            "grid_learning_rates" => self.grid_mut().learning_rates = parse_list(key, value)?,
            "grid_epochs" => self.grid_mut().epochs = parse_list(key, value)?,
            "grid_batch_sizes" => self.grid_mut().batch_sizes = parse_list(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "positive_class" => self.positive_class = parse(key, value)?,
            "averaging" => {
                self.averaging = match value.to_ascii_lowercase().as_str() {
                    "binary" => AveragingMode::Binary,
                    "macro" => AveragingMode::Macro,
                    "weighted" => AveragingMode::Weighted,
                    _ => return Err(format!("`averaging`: expected binary, macro or weighted, got `{value}`")),
                }
            }
            "alpha" => self.alpha = parse(key, value)?,
            "quickshift_kernel_size" => self.quickshift.kernel_size = parse(key, value)?,
            "quickshift_max_dist" => self.quickshift.max_dist = parse(key, value)?,
            "quickshift_ratio" => self.quickshift.ratio = parse(key, value)?,
            "quickshift_parent_search" => {
                self.quickshift.parent_search = match value.to_ascii_lowercase().as_str() {
                    "kernel_window" => ParentSearch::KernelWindow,
                    "max_dist" => ParentSearch::MaxDist,
                    _ => return Err(format!("`{key}`: expected kernel_window or max_dist, got `{value}`")),
                }
            }
            "lime_samples" => self.lime.num_samples = parse(key, value)?,
            "lime_kernel_width" => self.lime.kernel_width = parse(key, value)?,
            "lime_top_k" => self.lime.top_k = parse(key, value)?,
            "lime_fill" => {
                self.lime.fill = match value.to_ascii_lowercase().as_str() {
                    "segment_mean" | "mean" => FillPolicy::SegmentMean,
                    "zero" => FillPolicy::Zero,
                    _ => return Err(format!("`lime_fill`: expected segment_mean or zero, got `{value}`")),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "weights_dir" => self.weights_dir = Some(PathBuf::from(value)),
            "seed" => {
                self.seed = parse(key, value)?;
                self.training.seed = self.seed;
                self.lime.seed = self.seed;
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.quickshift.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::param("split_ratio must lie in (0,1)"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::param("image size must be positive"));
        }
        if self.head_widths.0 == 0 || self.head_widths.1 == 0 {
            return Err(Error::param("head widths must be positive"));
        }
        if self.repeats == 0 {
            return Err(Error::param("repeats must be at least 1"));
        }
        if self.positive_class > 1 {
            return Err(Error::param("positive_class must be 0 or 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha must lie in (0,1)"));
        }
        if self.lime.num_samples < 2 || self.lime.top_k == 0 || (self.lime.kernel_width.is_nan() || self.lime.kernel_width <= 0.0) {
            return Err(Error::param("lime needs >= 2 samples, top_k >= 1 and a positive kernel width"));
        }
        Ok(())
    }

    /// Dataset id, defaulting to the dataset directory's name.
    pub fn dataset_id(&self) -> String {
        self.dataset_id.clone().unwrap_or_else(|| {
            self.dataset_root
                .as_deref()
                .and_then(Path::file_name)
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    /// Serialises every key; parsing the result yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        if let Some(root) = &self.dataset_root {
            kv("dataset_root", root.display().to_string());
        }
        if let Some(id) = &self.dataset_id {
            kv("dataset_id", id.clone());
        }
        kv("backbone", self.backbone.to_string());
        kv("image_height", self.image_size.0.to_string());
        kv("image_width", self.image_size.1.to_string());
        kv("split_ratio", self.split_ratio.to_string());
        kv("head_dense1", self.head_widths.0.to_string());
        kv("head_dense2", self.head_widths.1.to_string());
        kv("seed", self.seed.to_string());
        kv("learning_rate", self.training.learning_rate.to_string());
        kv("epochs", self.training.epochs.to_string());
        kv("batch_size", self.training.batch_size.to_string());
        kv("optimizer", "adam".into());
        if let Some(g) = &self.grid {
            kv("grid_learning_rates", join(&g.learning_rates));
            kv("grid_epochs", join(&g.epochs));
            kv("grid_batch_sizes", join(&g.batch_sizes));
        }
        kv("repeats", self.repeats.to_string());
        kv("positive_class", self.positive_class.to_string());
        kv(
            "averaging",
            match self.averaging {
                AveragingMode::Binary => "binary",
                AveragingMode::Macro => "macro",
                AveragingMode::Weighted => "weighted",
            }
            .into(),
        );
        kv("alpha", self.alpha.to_string());
        kv("quickshift_kernel_size", self.quickshift.kernel_size.to_string());
        kv("quickshift_max_dist", self.quickshift.max_dist.to_string());
        kv("quickshift_ratio", self.quickshift.ratio.to_string());
        kv(
            "quickshift_parent_search",
            match self.quickshift.parent_search {
                ParentSearch::KernelWindow => "kernel_window",
                ParentSearch::MaxDist => "max_dist",
            }
            .into(),
        );
        kv("lime_samples", self.lime.num_samples.to_string());
        kv("lime_kernel_width", self.lime.kernel_width.to_string());
        kv("lime_top_k", self.lime.top_k.to_string());
        kv(
            "lime_fill",
            match self.lime.fill {
                FillPolicy::SegmentMean => "segment_mean",
                FillPolicy::Zero => "zero",
            }
            .into(),
        );
        kv("output_dir", self.output_dir.display().to_string());
        if let Some(dir) = &self.weights_dir {
            kv("weights_dir", dir.display().to_string());
        }
        out
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use covidscreen::config::ExperimentConfig;
use covidscreen::dataset::preprocess;
use covidscreen::experiment::{self, load_model, Workspace};
use covidscreen::explain::{explain, ExplanationReport};
use covidscreen::image::Image;
use covidscreen::model::{registry, LayerKind};
use covidscreen::report::{self, Split};
use covidscreen::training::{evaluate, extract_features, RunRecord};
use covidscreen::viz::{self, Colormap, Overlay};

#[derive(Parser)]
#[command(name = "covidscreen", version, about = "Train, evaluate and explain binary image screening models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file (`key = value` lines).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long, env = "COVIDSCREEN_SEED")]
    seed: Option<u64>,
    /// Any configuration key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root with one sub-directory per class (overrides `dataset_root`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Backbone name (overrides `backbone`).
    #[arg(long)]
    backbone: Option<String>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset directory, split it and write the manifest.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the classification head and write run records, models and plots.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score every learning rate / epochs / batch size combination.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a trained model on the test split of a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Run id (looked up under `<out>/models`) or a model file.
        #[arg(long)]
        model: String,
        /// Evaluate every image instead of the test split.
        #[arg(long)]
        all: bool,
    },
    /// Explain one prediction with superpixel perturbations.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: String,
        /// Explain this class instead of the predicted one.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Write class-activation heatmaps for selected layers.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: String,
        /// Comma-separated layer names; defaults to every convolution and activation layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long, value_enum, default_value_t = HeatmapMode::Gradient)]
        mode: HeatmapMode,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value = "jet")]
        colormap: String,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Build report tables from run records.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// Inspect the backbone registry.
    Backbones {
        #[command(subcommand)]
        action: BackboneAction,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum HeatmapMode {
    Gradient,
    Activation,
}

#[derive(Args, Clone)]
struct ReportArgs {
    /// Directory of run records.
    #[arg(long, default_value = "out/runs")]
    runs: PathBuf,
    /// Write CSV files here instead of printing to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ReportKind {
    /// Accuracy, precision, recall and F1 per model.
    Metrics {
        #[command(flatten)]
        args: ReportArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Wilson and Bayesian intervals on test accuracy.
    Ci {
        #[command(flatten)]
        args: ReportArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Mean of train and test accuracy per model and dataset.
    Average {
        #[command(flatten)]
        args: ReportArgs,
    },
    /// Every table plus misclassification counts and the best-model summary.
    All {
        #[command(flatten)]
        args: ReportArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum BackboneAction {
    List,
}

fn load_config(common: &Common, data: Option<&DataArgs>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)
            .with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(d) = data {
        if let Some(root) = &d.data {
            cfg.dataset_root = Some(root.clone());
        }
        if let Some(b) = &d.backbone {
            cfg.set("backbone", b)?;
        }
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut ExperimentConfig, t: &TrainArgs) -> Result<()> {
    if let Some(v) = t.epochs {
        cfg.set("epochs", &v.to_string())?;
    }
    if let Some(v) = t.lr {
        cfg.set("learning_rate", &v.to_string())?;
    }
    if let Some(v) = t.batch_size {
        cfg.set("batch_size", &v.to_string())?;
    }
    if let Some(v) = t.repeats {
        cfg.set("repeats", &v.to_string())?;
    }
    Ok(())
}

fn class_names_for(ws: &Workspace, run_id: &str) -> Option<[String; 2]> {
    RunRecord::load(&ws.runs_dir().join(format!("{run_id}.json")))
        .ok()
        .map(|r| r.class_names)
}

fn run_id_of(model_arg: &str) -> String {
    Path::new(model_arg)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| model_arg.to_string())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { common, data } => {
            let cfg = load_config(&common, Some(&data))?;
            let ds = experiment::load_dataset(&cfg)?;
            let (_, manifest) = experiment::split_dataset(&cfg, &ds)?;
            let ws = Workspace::new(&cfg.output_dir);
            ensure_dir(&ws.root)?;
            manifest.save(&ws.manifest_path())?;
            for (i, name) in manifest.class_names.iter().enumerate() {
                println!(
                    "{name}: {} train, {} test",
                    manifest.train_count[i], manifest.test_count[i]
                );
            }
            for e in &ds.errors {
                println!("unreadable: {} ({})", e.path.display(), e.message);
            }
            println!("manifest: {}", ws.manifest_path().display());
        }
        Command::Train { common, data, train } => {
            let mut cfg = load_config(&common, Some(&data))?;
            apply_train_args(&mut cfg, &train)?;
            for run in experiment::run_experiment(&cfg)? {
                let m = &run.record.test_metrics;
                println!(
                    "{}  test accuracy {:.4}  misclassified {}/{}",
                    run.record.run_id,
                    m.accuracy,
                    m.confusion.misclassified(),
                    m.confusion.total()
                );
            }
        }
        Command::GridSearch { common, data } => {
            let cfg = load_config(&common, Some(&data))?;
            let result = experiment::run_grid_search(&cfg)?;
            let best = result
                .table
                .iter()
                .find(|c| {
                    c.lr == result.best.learning_rate
                        && c.epochs == result.best.epochs
                        && c.batch == result.best.batch_size
                })
                .map_or(f64::NAN, |c| c.val_accuracy);
            println!(
                "evaluated {} configurations; best lr {} epochs {} batch {} (val accuracy {:.4})",
                result.table.len(),
                result.best.learning_rate,
                result.best.epochs,
                result.best.batch_size,
                best
            );
            println!("table: {}", cfg.output_dir.join("grid_search.csv").display());
        }
        Command::Evaluate {
            common,
            data,
            model,
            all,
        } => {
            let cfg = load_config(&common, Some(&data))?;
            let ws = Workspace::new(&cfg.output_dir);
            let classifier = load_model(&ws, &model)?;
            let ds = experiment::load_dataset(&cfg)?;
            let samples = if all {
                ds.samples
            } else {
                experiment::split_dataset(&cfg, &ds)?.0.test
            };
            let features = extract_features(&classifier, &samples)?;
            let m = evaluate(&classifier, &features, cfg.positive_class, cfg.averaging)?;
            let c = m.confusion;
            println!("samples {}  tp {}  fp {}  tn {}  fn {}", c.total(), c.tp, c.fp, c.tn, c.fn_);
            println!(
                "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
                m.accuracy, m.precision, m.recall, m.f1
            );
            for w in &m.warnings {
                println!("warning: {w}");
            }
        }
        Command::Explain {
            common,
            image,
            model,
            class,
        } => {
            let mut cfg = load_config(&common, None)?;
            if class.is_some() {
                cfg.lime.class_index = class;
            }
            let ws = Workspace::new(&cfg.output_dir);
            let classifier = load_model(&ws, &model)?;
            let (h, w) = cfg.image_size;
            let img = Image::open(&image)?.resize(h, w);
            let exp = explain(&classifier, &img, &cfg.quickshift, &cfg.lime)?;
            let run_id = run_id_of(&model);
            let class_name = class_names_for(&ws, &run_id).map(|n| n[exp.class_index].clone());
            let dir = ws.root.join("explanations");
            ensure_dir(&dir)?;
            let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let png = dir.join(viz::figure_name(&run_id, "lime", &stem));
            viz::render_overlay(&img, Overlay::Mask(&exp.overlay_mask, viz::MASK_TINT), 0.5, &png)?;
            let json = png.with_extension("json");
            let report = ExplanationReport::new(&exp, class_name, cfg.quickshift, cfg.lime.clone());
            std::fs::write(&json, serde_json::to_string_pretty(&report)?)
                .with_context(|| format!("writing {}", json.display()))?;
            for w in &exp.warnings {
                println!("warning: {w}");
            }
            println!(
                "class {}  superpixels {}  top features {:?}",
                exp.class_index, exp.n_segments, exp.top_features
            );
            println!("overlay: {}\nreport: {}", png.display(), json.display());
        }
        Command::Heatmap {
            common,
            image,
            model,
            layers,
            mode,
            class,
            colormap,
            alpha,
        } => {
            let cfg = load_config(&common, None)?;
            let ws = Workspace::new(&cfg.output_dir);
            let classifier = load_model(&ws, &model)?;
            let cmap: Colormap = colormap.parse()?;
            let img = Image::open(&image)?;
            let input = preprocess(&img, &classifier.spec)?;
            let layers = if layers.is_empty() {
                classifier
                    .backbone
                    .layers
                    .iter()
                    .filter(|l| !matches!(l.kind, LayerKind::MaxPool { .. }))
                    .map(|l| l.name.clone())
                    .collect()
            } else {
                layers
            };
            let maps = match mode {
                HeatmapMode::Activation => viz::activation_maps(&classifier.backbone, &input, &layers)?.maps,
                HeatmapMode::Gradient => {
                    let class = match class {
                        Some(c) => c,
                        None => {
                            let p = classifier.predict_proba(std::slice::from_ref(&input))?[0];
                            usize::from(p[1] > p[0])
                        }
                    };
                    layers
                        .iter()
                        .map(|l| viz::gradient_weighted_map(&classifier, &input, class, l))
                        .collect::<covidscreen::Result<Vec<_>>>()?
                }
            };
            let dir = ws.root.join("heatmaps");
            ensure_dir(&dir)?;
            let run_id = run_id_of(&model);
            for map in &maps {
                let path = dir.join(viz::figure_name(&run_id, "heatmap", &map.layer));
                viz::render_overlay(&img, Overlay::Heatmap(map, cmap), alpha, &path)?;
                let flag = if map.all_zero { "  (all zero)" } else { "" };
                println!("{}{flag}", path.display());
            }
        }
        Command::Report { kind } => run_report(kind)?,
        Command::Backbones {
            action: BackboneAction::List,
        } => {
            println!("{:<18} {:>11} {:>9}  weights", "name", "input", "features");
            for spec in registry() {
                let (h, w, c) = spec.input_shape;
                println!(
                    "{:<18} {:>11} {:>9}  {}{}",
                    spec.name.as_str(),
                    format!("{h}x{w}x{c}"),
                    spec.feature_dim,
                    spec.weights_source,
                    if spec.requires_download() { "" } else { " (built in)" }
                );
            }
        }
    }
    Ok(())
}

fn emit(out: Option<&Path>, name: &str, write: impl FnOnce(&mut dyn std::io::Write) -> covidscreen::Result<()>) -> Result<()> {
    match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let path = dir.join(name);
            let mut file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write(&mut file)?;
            println!("{}", path.display());
        }
        None => write(&mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_report(kind: ReportKind) -> Result<()> {
    let args = match &kind {
        ReportKind::Metrics { args, .. }
        | ReportKind::Ci { args, .. }
        | ReportKind::Average { args }
        | ReportKind::All { args, .. } => args.clone(),
    };
    let (records, warnings) = report::load_runs(&args.runs)
        .with_context(|| format!("reading run records from {}", args.runs.display()))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let out = args.out.as_deref();
    match kind {
        ReportKind::Metrics { split, .. } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let rows = report::metric_table(&records, split)?;
            let mut studies: Vec<&str> = rows.iter().map(|r| r.study.as_str()).collect();
            studies.dedup();
            if out.is_none() && studies.len() > 1 {
                bail!(
                    "runs cover several datasets ({}); pass --out to write one table per dataset",
                    studies.join(", ")
                );
            }
            for study in studies {
                let selected: Vec<_> = rows.iter().filter(|r| r.study == study).collect();
                emit(out, &format!("metrics_{}_{study}.csv", split.name()), |w| {
                    report::write_metric_csv(&selected, w)
                })?;
            }
        }
        ReportKind::Ci { alpha, .. } => {
            let rows = report::confidence_table(&records, alpha)?;
            emit(out, "confidence_intervals.csv", |w| {
                covidscreen::confidence::write_interval_csv(&rows, w)
            })?;
        }
        ReportKind::Average { .. } => {
            let table = report::average_table(&records)?;
            emit(out, "average_accuracy.csv", |w| report::write_average_csv(&table, w))?;
        }
        ReportKind::All { alpha, .. } => {
            let mut bundle = report::generate_report(&records, alpha)?;
            bundle.warnings = warnings;
            let dir = out.map_or_else(|| args.runs.with_file_name("reports"), Path::to_path_buf);
            for path in bundle.write(&dir)? {
                println!("{}", path.display());
            }
            for b in &bundle.best {
                println!(
                    "best on {}: {} (test accuracy {:.4}, {} misclassified)",
                    b.study, b.model, b.test_accuracy, b.misclassified
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

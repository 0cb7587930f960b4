//! Two-class image folders: ingestion, stratified splitting and
//! backbone-specific preprocessing.
//!
//! The on-disk layout is `root/<class_name>/*.{png,jpg,jpeg}`. Class
//! directories are ordered lexicographically and that order assigns labels
//! 0 and 1.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Tensor};
use crate::model::BackboneSpec;

/// Default input resolution for real datasets.
pub const DEFAULT_IMAGE_SIZE: (usize, usize) = (224, 224);
/// Fraction of every class assigned to the training split.
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image: Image,
    pub label: usize,
    pub source_id: String,
}

/// A file that was found but could not be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileError {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: [String; 2],
    pub samples: Vec<ImageSample>,
    pub errors: Vec<FileError>,
}

impl Dataset {
    pub fn class_counts(&self) -> [usize; 2] {
        count_labels(&self.samples)
    }
}

fn count_labels(samples: &[ImageSample]) -> [usize; 2] {
    let mut counts = [0; 2];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: [String; 2],
    pub train_count: [usize; 2],
    pub test_count: [usize; 2],
    pub split_ratio: f64,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(class_names: [String; 2], split: &Split, split_ratio: f64, seed: u64) -> Self {
        Self {
            class_names,
            train_count: count_labels(&split.train),
            test_count: count_labels(&split.test),
            split_ratio,
            seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Loads every image under the two class directories of `root`, resized to
/// `target_size` as `(height, width)`.
///
/// Undecodable files are collected in [`Dataset::errors`]; loading fails only
/// if the directory structure is wrong or a class ends up empty.
pub fn load_directory(root: &Path, target_size: (usize, usize)) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.len() != 2 {
        return Err(Error::Structural(format!(
            "{} must contain exactly two class directories, found {}",
            root.display(),
            class_dirs.len()
        )));
    }
    let class_names: [String; 2] = [0, 1].map(|i| {
        class_dirs[i]
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });

    let mut files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        files.extend(
            read_dir_sorted(dir)?
                .into_iter()
                .filter(|p| is_image_file(p))
                .map(|p| (label, p)),
        );
    }

    let (h, w) = target_size;
    let results: Vec<std::result::Result<ImageSample, FileError>> = files
        .par_iter()
        .map(|(label, path)| {
            Image::open(path)
                .map(|img| ImageSample {
                    image: img.resize(h, w),
                    label: *label,
                    source_id: path
                        .strip_prefix(root)
                        .unwrap_or(path)
                        .to_string_lossy()
                        .into_owned(),
                })
                .map_err(|e| FileError {
                    path: path.clone(),
                    message: e.to_string(),
                })
        })
        .collect();

    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("skipping {}: {}", e.path.display(), e.message);
                errors.push(e);
            }
        }
    }
    let counts = count_labels(&samples);
    for (name, count) in class_names.iter().zip(counts) {
        if count == 0 {
            return Err(Error::Structural(format!(
                "class `{name}` has no decodable images"
            )));
        }
    }
    Ok(Dataset {
        class_names,
        samples,
        errors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Per-class shuffled split; each class contributes
/// `round((1 − ratio) · class_size)` samples to the test set.
pub fn stratified_split(samples: &[ImageSample], ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::param(format!("split ratio {ratio} not in (0, 1)")));
    }
    if let Some(s) = samples.iter().find(|s| s.label > 1) {
        return Err(Error::param(format!(
            "label {} of {} is not binary",
            s.label, s.source_id
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = samples.iter().find(|s| !seen.insert(s.source_id.as_str())) {
        return Err(Error::Structural(format!(
            "duplicate source id {}",
            dup.source_id
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for label in 0..2 {
        let mut idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label == label)
            .collect();
        if idx.len() < 2 {
            return Err(Error::param(format!(
                "class {label} has {} samples; at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = ((1.0 - ratio) * idx.len() as f64).round() as usize;
        let (test, train) = idx.split_at(n_test);
        test_idx.extend_from_slice(test);
        train_idx.extend_from_slice(train);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let split = Split {
        train: train_idx.iter().map(|&i| samples[i].clone()).collect(),
        test: test_idx.iter().map(|&i| samples[i].clone()).collect(),
    };
    let train_ids: HashSet<&str> = split.train.iter().map(|s| s.source_id.as_str()).collect();
    assert!(
        split.test.iter().all(|s| !train_ids.contains(s.source_id.as_str())),
        "train/test leakage"
    );
    Ok(split)
}

/// Resizes to the backbone input and applies its per-channel normalization.
pub fn preprocess(image: &Image, backbone: &BackboneSpec) -> Result<Tensor> {
    let (h, w, c) = backbone.input_shape;
    let resized = image.resize(h, w);
    if (resized.height(), resized.width(), resized.channels()) != (h, w, c) {
        return Err(Error::ShapeMismatch {
            expected: format!("{h}x{w}x{c}"),
            actual: format!(
                "{}x{}x{}",
                resized.height(),
                resized.width(),
                resized.channels()
            ),
        });
    }
    let mut t = Tensor::from_image(&resized);
    let norm = backbone.normalization;
    for ch in 0..c {
        let (mean, std) = (norm.mean[ch], norm.std[ch]);
        t.plane_mut(ch).iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    Ok(t)
}

pub fn preprocess_batch(images: &[&Image], backbone: &BackboneSpec) -> Result<Vec<Tensor>> {
    images.par_iter().map(|img| preprocess(img, backbone)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lookup, Normalization};
    use proptest::prelude::*;

    fn samples(per_class: [usize; 2]) -> Vec<ImageSample> {
        let mut out = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                out.push(ImageSample {
                    image: Image::filled(1, 1, [label as f64; 3]).unwrap(),
                    label,
                    source_id: format!("c{label}/{i}.png"),
                });
            }
        }
        out
    }

    #[test]
    fn reference_split_counts() {
        let split = stratified_split(&samples([200, 200]), 0.8, 1).unwrap();
        assert_eq!(count_labels(&split.train), [160, 160]);
        assert_eq!(count_labels(&split.test), [40, 40]);
    }

    #[test]
    fn symmetric_split() {
        let split = stratified_split(&samples([10, 10]), 0.5, 3).unwrap();
        assert_eq!(count_labels(&split.train), [5, 5]);
        assert_eq!(count_labels(&split.test), [5, 5]);
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let s = samples([30, 30]);
        let a = stratified_split(&s, 0.8, 42).unwrap();
        assert_eq!(a, stratified_split(&s, 0.8, 42).unwrap());
        assert_ne!(a, stratified_split(&s, 0.8, 43).unwrap());
    }

    #[test]
    fn split_rejects_tiny_classes_and_bad_ratio() {
        assert!(stratified_split(&samples([1, 5]), 0.8, 0).is_err());
        assert!(stratified_split(&samples([5, 5]), 1.0, 0).is_err());
        assert!(stratified_split(&samples([5, 5]), 0.0, 0).is_err());
    }

    #[test]
    fn duplicate_source_ids_are_rejected() {
        let mut s = samples([3, 3]);
        s[1].source_id = s[0].source_id.clone();
        assert!(matches!(
            stratified_split(&s, 0.5, 0),
            Err(Error::Structural(_))
        ));
    }

    proptest! {
        #[test]
        fn split_is_stratified_and_disjoint(a in 2usize..60, b in 2usize..60, ratio in 0.05f64..0.95, seed: u64) {
            let split = stratified_split(&samples([a, b]), ratio, seed).unwrap();
            let train = count_labels(&split.train);
            for (label, n) in [a, b].into_iter().enumerate() {
                let frac = train[label] as f64 / n as f64;
                prop_assert!((frac - ratio).abs() <= 1.0 / n as f64 + 1e-12);
                prop_assert_eq!(train[label] + count_labels(&split.test)[label], n);
            }
            let ids: HashSet<_> = split.train.iter().map(|s| &s.source_id).collect();
            prop_assert!(split.test.iter().all(|s| !ids.contains(&s.source_id)));
        }
    }

    #[test]
    fn zero_image_identity_normalization() {
        let mut spec = lookup("TinyCNN").unwrap();
        spec.normalization = Normalization::IDENTITY;
        let t = preprocess(&Image::filled(32, 32, [0.0; 3]).unwrap(), &spec).unwrap();
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centering_normalization_zeroes_half_grey() {
        let mut spec = lookup("TinyCNN").unwrap();
        spec.normalization = Normalization::SYMMETRIC;
        let t = preprocess(&Image::filled(8, 8, [0.5; 3]).unwrap(), &spec).unwrap();
        assert_eq!(t.shape(), (3, 32, 32));
        assert!(t.data.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn preprocess_matches_registry_shape() {
        let spec = lookup("VGG16").unwrap();
        let img = Image::from_fn(50, 70, |r, c| [(r % 7) as f64 / 7.0, (c % 5) as f64 / 5.0, 0.3]).unwrap();
        let t = preprocess(&img, &spec).unwrap();
        assert_eq!(t.shape(), (3, 224, 224));
    }

    fn write_png(path: &Path, value: u8) {
        image::RgbImage::from_pixel(6, 4, image::Rgb([value, value, value]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn loads_two_class_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (class, n) in [("NonCOVID", 3), ("COVID", 2)] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..n {
                write_png(&dir.path().join(class).join(format!("{i}.png")), 40 * i as u8);
            }
        }
        std::fs::write(dir.path().join("README.txt"), "ignored").unwrap();
        let ds = load_directory(dir.path(), (8, 8)).unwrap();
        assert_eq!(ds.class_names, ["COVID".to_string(), "NonCOVID".to_string()]);
        assert_eq!(ds.class_counts(), [2, 3]);
        assert!(ds
            .samples
            .iter()
            .all(|s| s.image.height() == 8 && s.image.width() == 8 && s.image.channels() == 3));
    }

    #[test]
    fn corrupt_file_is_recorded_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a", "b"] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..3 {
                write_png(&dir.path().join(class).join(format!("{i}.png")), 100);
            }
        }
        std::fs::write(dir.path().join("a").join("broken.png"), b"not a png").unwrap();
        let ds = load_directory(dir.path(), (4, 4)).unwrap();
        assert_eq!(ds.class_counts(), [3, 3]);
        assert_eq!(ds.errors.len(), 1);
        assert!(ds.errors[0].path.ends_with("broken.png"));
    }

    #[test]
    fn single_class_directory_is_structural_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("only")).unwrap();
        write_png(&dir.path().join("only").join("x.png"), 0);
        assert!(matches!(
            load_directory(dir.path(), (4, 4)),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn manifest_roundtrip() {
        let s = samples([5, 5]);
        let split = stratified_split(&s, 0.8, 9).unwrap();
        let m = DatasetManifest::new(["a".into(), "b".into()], &split, 0.8, 9);
        assert_eq!(m.train_count, [4, 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }
}

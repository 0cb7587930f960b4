//! Small generated two-class image sets for tests, demos and smoke runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::image::Image;

/// Class directory names used by [`shapes`].
pub const SHAPE_CLASSES: [&str; 2] = ["disk", "ring"];
/// Class directory names used by [`solid_intensity`].
pub const SOLID_CLASSES: [&str; 2] = ["dark", "light"];

fn noisy(v: f64, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> f64 {
    (v + noise.sample(rng)).clamp(0.0, 1.0)
}

/// Filled disks (label 0) and thin rings (label 1) of random radius and
/// position on a noisy dark background, `n_per_class` of each.
pub fn shapes(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if size < 16 {
        return Err(Error::param("shape images need at least 16 pixels per side"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let s = size as f64;
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = i % 2;
        let radius = rng.gen_range(0.22..0.3) * s;
        let cy = rng.gen_range(radius + 1.0..s - radius - 1.0);
        let cx = rng.gen_range(radius + 1.0..s - radius - 1.0);
        let thickness = 0.09 * s;
        let bg = rng.gen_range(0.08..0.14);
        let fg = rng.gen_range(0.8..0.9);
        let image = Image::from_fn(size, size, |r, c| {
            let d = ((r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2)).sqrt();
            let inside = if label == 0 {
                d <= radius
            } else {
                d <= radius && d >= radius - thickness
            };
            let v = noisy(if inside { fg } else { bg }, &mut rng, &noise);
            [v, v, v]
        })?;
        out.push(ImageSample {
            image,
            label,
            source_id: format!("{}/{:04}.png", SHAPE_CLASSES[label], i / 2),
        });
    }
    Ok(out)
}

/// Uniform dark (label 0) and light (label 1) images with mild noise.
pub fn solid_intensity(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if size == 0 {
        return Err(Error::param("image size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = i % 2;
        let level = if label == 0 {
            rng.gen_range(0.1..0.3)
        } else {
            rng.gen_range(0.7..0.9)
        };
        let image = Image::from_fn(size, size, |_, _| {
            let v = noisy(level, &mut rng, &noise);
            [v, v, v]
        })?;
        out.push(ImageSample {
            image,
            label,
            source_id: format!("{}/{:04}.png", SOLID_CLASSES[label], i / 2),
        });
    }
    Ok(out)
}

/// Writes samples as PNG files under `root/<class_names[label]>/`.
pub fn write_image_dir(root: &Path, class_names: [&str; 2], samples: &[ImageSample]) -> Result<()> {
    for name in class_names {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let path = root
            .join(class_names[s.label])
            .join(format!("{i:04}.png"));
        s.image.save_png(&path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = shapes(5, 32, 1).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.iter().filter(|s| s.label == 1).count(), 5);
        assert_eq!(a, shapes(5, 32, 1).unwrap());
        let b = solid_intensity(3, 8, 1).unwrap();
        assert!(b.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn rings_are_darker_than_disks_on_average() {
        let s = shapes(20, 32, 3).unwrap();
        let mean = |label| {
            let v: Vec<f64> = s
                .iter()
                .filter(|x| x.label == label)
                .map(|x| x.image.data().iter().sum::<f64>() / x.image.data().len() as f64)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(0) > mean(1));
    }

    #[test]
    fn written_directory_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let samples = solid_intensity(2, 8, 0).unwrap();
        write_image_dir(dir.path(), SOLID_CLASSES, &samples).unwrap();
        let ds = crate::dataset::load_directory(dir.path(), (8, 8)).unwrap();
        assert_eq!(ds.class_counts(), [2, 2]);
        assert_eq!(ds.class_names, ["dark".to_string(), "light".to_string()]);
    }
}

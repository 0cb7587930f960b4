//! LIME over quick-shift superpixels.
//!
//! The pipeline is: segment the image, draw binary on/off masks over the
//! superpixels, render and classify each perturbed image, weight every
//! sample by its cosine distance to the unperturbed image, then fit a
//! weighted linear surrogate whose coefficients rank the superpixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::preprocess;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ClassifierModel;
use crate::segmentation::{quickshift, segment_means, QuickShiftParams, SuperpixelSegmentation};

/// Ridge penalty on the surrogate slopes, for conditioning only.
pub const SURROGATE_RIDGE: f64 = 1e-6;

/// How switched-off superpixels are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// The superpixel's own mean colour.
    #[default]
    SegmentMean,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeParams {
    pub num_samples: usize,
    pub kernel_width: f64,
    pub top_k: usize,
    pub seed: u64,
    pub fill: FillPolicy,
    /// Class to explain; `None` explains the model's prediction on the
    /// unperturbed image.
    pub class_index: Option<usize>,
}

impl Default for LimeParams {
    fn default() -> Self {
        Self {
            num_samples: 150,
            kernel_width: 0.25,
            top_k: 4,
            seed: 0,
            fill: FillPolicy::SegmentMean,
            class_index: None,
        }
    }
}

/// Anything that maps images to two-class probabilities.
pub trait ImageClassifier: Sync {
    fn predict_images(&self, images: &[Image]) -> Result<Vec<[f64; 2]>>;
}

impl ImageClassifier for ClassifierModel {
    fn predict_images(&self, images: &[Image]) -> Result<Vec<[f64; 2]>> {
        let tensors = images
            .par_iter()
            .map(|img| preprocess(img, &self.spec))
            .collect::<Result<Vec<_>>>()?;
        self.predict_proba(&tensors)
    }
}

/// Adapts a per-image closure into an [`ImageClassifier`].
pub struct FnClassifier<F>(pub F);

impl<F> ImageClassifier for FnClassifier<F>
where
    F: Fn(&Image) -> [f64; 2] + Sync,
{
    fn predict_images(&self, images: &[Image]) -> Result<Vec<[f64; 2]>> {
        Ok(images.par_iter().map(|img| (self.0)(img)).collect())
    }
}

/// `N×K` masks; row 0 is all ones, the rest are fair coin flips.
pub fn sample_perturbations(k: usize, n: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    if k == 0 {
        return Err(Error::param("need at least one superpixel"));
    }
    if n < 2 {
        return Err(Error::param("need at least two perturbations"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(n);
    masks.push(vec![true; k]);
    for _ in 1..n {
        masks.push((0..k).map(|_| rng.gen_bool(0.5)).collect());
    }
    Ok(masks)
}

/// Renders `image` with the superpixels switched off by `mask` filled per `fill`.
pub fn apply_perturbation(
    image: &Image,
    seg: &SuperpixelSegmentation,
    mask: &[bool],
    fill: FillPolicy,
) -> Result<Image> {
    let means = segment_means(image, seg);
    apply_with_means(image, seg, mask, fill, &means)
}

fn apply_with_means(
    image: &Image,
    seg: &SuperpixelSegmentation,
    mask: &[bool],
    fill: FillPolicy,
    means: &[[f64; 3]],
) -> Result<Image> {
    if mask.len() != seg.n_segments {
        return Err(Error::LengthMismatch {
            left: mask.len(),
            right: seg.n_segments,
        });
    }
    if image.height() != seg.height || image.width() != seg.width {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", seg.height, seg.width),
            actual: format!("{}x{}", image.height(), image.width()),
        });
    }
    let mut out = image.to_rgb();
    for (i, &label) in seg.labels.iter().enumerate() {
        if !mask[label] {
            let px = out.pixel_mut(i);
            match fill {
                FillPolicy::SegmentMean => px.copy_from_slice(&means[label]),
                FillPolicy::Zero => px.fill(0.0),
            }
        }
    }
    Ok(out)
}

/// Cosine distance of `mask` to the all-ones mask and its kernel weight
/// `exp(−d² / kernel_width²)`. The all-off mask is assigned distance 1.
pub fn perturbation_weight(mask: &[bool], kernel_width: f64) -> Result<(f64, f64)> {
    if kernel_width.is_nan() || kernel_width <= 0.0 {
        return Err(Error::param("kernel width must be positive"));
    }
    if mask.is_empty() {
        return Err(Error::Empty("mask"));
    }
    let on = mask.iter().filter(|&&b| b).count();
    let distance = if on == 0 {
        1.0
    } else {
        1.0 - (on as f64 / mask.len() as f64).sqrt()
    };
    let weight = (-(distance * distance) / (kernel_width * kernel_width)).exp();
    Ok((distance, weight))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBatch {
    pub masks: Vec<Vec<bool>>,
    pub predictions: Vec<[f64; 2]>,
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl PerturbationBatch {
    /// Builds a batch from masks and black-box outputs, computing distances and weights.
    pub fn new(
        masks: Vec<Vec<bool>>,
        predictions: Vec<[f64; 2]>,
        kernel_width: f64,
        seed: u64,
    ) -> Result<Self> {
        if masks.len() != predictions.len() {
            return Err(Error::LengthMismatch {
                left: masks.len(),
                right: predictions.len(),
            });
        }
        let (distances, weights) = masks
            .iter()
            .map(|m| perturbation_weight(m, kernel_width))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self {
            masks,
            predictions,
            distances,
            weights,
            seed,
        })
    }

    pub fn num_features(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Weighted ridge regression with an unpenalised intercept:
/// minimises `Σ wᵢ (yᵢ − β₀ − βᵀxᵢ)² + λ‖β‖²` via Cholesky on the normal equations.
pub fn weighted_ridge(rows: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> Result<Surrogate> {
    if rows.is_empty() {
        return Err(Error::Empty("regression design"));
    }
    if rows.len() != y.len() || rows.len() != w.len() {
        return Err(Error::LengthMismatch {
            left: rows.len(),
            right: y.len().min(w.len()),
        });
    }
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::param("regression weights must be finite and non-negative"));
    }
    let k = rows[0].len();
    let dim = k + 1;
    let mut a = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    let mut xt = vec![0.0; dim];
    for ((row, &yi), &wi) in rows.iter().zip(y).zip(w) {
        if row.len() != k {
            return Err(Error::LengthMismatch {
                left: row.len(),
                right: k,
            });
        }
        xt[0] = 1.0;
        xt[1..].copy_from_slice(row);
        for i in 0..dim {
            let wx = wi * xt[i];
            b[i] += wx * yi;
            for j in 0..=i {
                a[i * dim + j] += wx * xt[j];
            }
        }
    }
    for i in 1..dim {
        a[i * dim + i] += lambda;
    }
    let theta = cholesky_solve(&mut a, &b, dim)?;
    Ok(Surrogate {
        intercept: theta[0],
        coefficients: theta[1..].to_vec(),
    })
}

/// Solves `A x = b` for symmetric positive definite `A` (lower triangle used, overwritten).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-14;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d.is_nan() || d <= tol {
            return Err(Error::Singular);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * z[k];
        }
        z[i] = s / a[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= a[k * n + i] * x[k];
        }
        x[i] = s / a[i * n + i];
    }
    Ok(x)
}

/// Fits the weighted linear surrogate to the probability of `class_index`.
pub fn fit_surrogate(batch: &PerturbationBatch, class_index: usize) -> Result<Surrogate> {
    if class_index > 1 {
        return Err(Error::param(format!("class index {class_index} is not binary")));
    }
    let rows: Vec<Vec<f64>> = batch
        .masks
        .iter()
        .map(|m| m.iter().map(|&b| f64::from(u8::from(b))).collect())
        .collect();
    let y: Vec<f64> = batch.predictions.iter().map(|p| p[class_index]).collect();
    weighted_ridge(&rows, &y, &batch.weights, SURROGATE_RIDGE)
}

/// Indices of the `k` largest coefficients, largest first; ties go to the lower index.
pub fn top_features(coefficients: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coefficients.len()).collect();
    idx.sort_by(|&a, &b| {
        coefficients[b]
            .partial_cmp(&coefficients[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(coefficients.len()));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub class_index: usize,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub top_features: Vec<usize>,
    pub height: usize,
    pub width: usize,
    /// Union of the top superpixels, raster order.
    pub overlay_mask: Vec<bool>,
    pub n_segments: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

const PREDICT_CHUNK: usize = 16;

/// Segments `image` with quick shift, then explains it.
pub fn explain(
    model: &dyn ImageClassifier,
    image: &Image,
    seg_params: &QuickShiftParams,
    lime: &LimeParams,
) -> Result<Explanation> {
    let seg = quickshift(image, seg_params)?;
    explain_segmented(model, image, &seg, lime)
}

/// Explains `image` over an existing segmentation.
pub fn explain_segmented(
    model: &dyn ImageClassifier,
    image: &Image,
    seg: &SuperpixelSegmentation,
    lime: &LimeParams,
) -> Result<Explanation> {
    let (batch, _) = perturbation_batch(model, image, seg, lime)?;
    let class_index = match lime.class_index {
        Some(c) if c > 1 => return Err(Error::param(format!("class index {c} is not binary"))),
        Some(c) => c,
        None => usize::from(batch.predictions[0][1] > batch.predictions[0][0]),
    };
    let surrogate = fit_surrogate(&batch, class_index)?;
    let top = top_features(&surrogate.coefficients, lime.top_k);
    let mut in_top = vec![false; seg.n_segments];
    top.iter().for_each(|&t| in_top[t] = true);
    let mut warnings = Vec::new();
    if seg.n_segments == 1 {
        warnings.push("segmentation produced a single superpixel; the explanation is trivial".into());
    }
    Ok(Explanation {
        class_index,
        coefficients: surrogate.coefficients,
        intercept: surrogate.intercept,
        top_features: top,
        height: seg.height,
        width: seg.width,
        overlay_mask: seg.labels.iter().map(|&l| in_top[l]).collect(),
        n_segments: seg.n_segments,
        seed: lime.seed,
        warnings,
    })
}

/// Samples masks, renders the perturbed images and queries the classifier.
///
/// Also returns the segmentation's mean colours, which callers rendering
/// perturbations themselves can reuse.
pub fn perturbation_batch(
    model: &dyn ImageClassifier,
    image: &Image,
    seg: &SuperpixelSegmentation,
    lime: &LimeParams,
) -> Result<(PerturbationBatch, Vec<[f64; 3]>)> {
    let masks = sample_perturbations(seg.n_segments, lime.num_samples, lime.seed)?;
    let means = segment_means(image, seg);
    let mut predictions = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(PREDICT_CHUNK) {
        let images = chunk
            .par_iter()
            .map(|m| apply_with_means(image, seg, m, lime.fill, &means))
            .collect::<Result<Vec<_>>>()?;
        let preds = model.predict_images(&images)?;
        if preds.len() != images.len() {
            return Err(Error::LengthMismatch {
                left: preds.len(),
                right: images.len(),
            });
        }
        predictions.extend(preds);
    }
    Ok((
        PerturbationBatch::new(masks, predictions, lime.kernel_width, lime.seed)?,
        means,
    ))
}

/// JSON report written next to the overlay image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub class: usize,
    pub class_name: Option<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub top_features: Vec<usize>,
    pub n_segments: usize,
    pub seed: u64,
    pub params: ExplanationParams,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationParams {
    pub quickshift: QuickShiftParams,
    pub lime: LimeParams,
}

impl ExplanationReport {
    pub fn new(
        exp: &Explanation,
        class_name: Option<String>,
        quickshift: QuickShiftParams,
        lime: LimeParams,
    ) -> Self {
        Self {
            class: exp.class_index,
            class_name,
            coefficients: exp.coefficients.clone(),
            intercept: exp.intercept,
            top_features: exp.top_features.clone(),
            n_segments: exp.n_segments,
            seed: exp.seed,
            params: ExplanationParams { quickshift, lime },
            warnings: exp.warnings.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::link_and_cut;

    /// Segmentation with one superpixel per vertical stripe of width `stripe`.
    fn stripes(h: usize, w: usize, stripe: usize) -> SuperpixelSegmentation {
        let labels: Vec<usize> = (0..h * w).map(|i| (i % w) / stripe).collect();
        let n = labels.iter().max().unwrap() + 1;
        SuperpixelSegmentation {
            height: h,
            width: w,
            parent: (0..h * w).collect(),
            density: vec![1.0; h * w],
            parent_distance: vec![0.0; h * w],
            labels,
            n_segments: n,
        }
    }

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| [r as f64 / h as f64, c as f64 / w as f64, 0.5]).unwrap()
    }

    #[test]
    fn masks_are_seeded_and_anchor_row_zero() {
        let a = sample_perturbations(5, 150, 7).unwrap();
        assert_eq!(a.len(), 150);
        assert_eq!(a[0], vec![true; 5]);
        assert_eq!(a, sample_perturbations(5, 150, 7).unwrap());
        assert_ne!(a, sample_perturbations(5, 150, 8).unwrap());
        assert!(sample_perturbations(0, 10, 0).is_err());
        assert!(sample_perturbations(3, 1, 0).is_err());
    }

    #[test]
    fn single_feature_masks() {
        let m = sample_perturbations(1, 40, 3).unwrap();
        assert!(m.iter().all(|row| row.len() == 1));
        assert!(m.iter().any(|row| !row[0]));
    }

    #[test]
    fn bernoulli_mean_is_half() {
        let m = sample_perturbations(10, 5001, 99).unwrap();
        let ones = m[1..].iter().flatten().filter(|&&b| b).count();
        let mean = ones as f64 / (5000.0 * 10.0);
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn identity_and_flattening_perturbations() {
        let img = gradient_image(6, 8);
        let seg = stripes(6, 8, 2);
        let same = apply_perturbation(&img, &seg, &[true; 4], FillPolicy::SegmentMean).unwrap();
        assert_eq!(same, img);

        let flat = apply_perturbation(&img, &seg, &[false; 4], FillPolicy::SegmentMean).unwrap();
        let means = segment_means(&img, &seg);
        for i in 0..img.pixel_count() {
            assert_eq!(flat.pixel(i), &means[seg.labels[i]]);
        }

        let zero = apply_perturbation(&img, &seg, &[false; 4], FillPolicy::Zero).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_off_superpixel_is_local() {
        let img = gradient_image(6, 8);
        let seg = stripes(6, 8, 2);
        let out = apply_perturbation(&img, &seg, &[true, false, true, true], FillPolicy::SegmentMean).unwrap();
        for i in 0..img.pixel_count() {
            if seg.labels[i] != 1 {
                assert_eq!(out.pixel(i), img.pixel(i));
            }
        }
        assert!(apply_perturbation(&img, &seg, &[true; 3], FillPolicy::Zero).is_err());
    }

    #[test]
    fn weights_follow_cosine_distance() {
        assert_eq!(perturbation_weight(&[true; 8], 0.25).unwrap(), (0.0, 1.0));
        let (d, w) = perturbation_weight(&[true, false, true, false, true, false, true, false], 0.25).unwrap();
        assert!((d - 0.292_893_218_813_452_4).abs() < 1e-15);
        assert!((w - 0.253_451_447_718_974_5).abs() < 1e-12, "{w}");
        let (d0, w0) = perturbation_weight(&[false; 8], 0.25).unwrap();
        assert_eq!(d0, 1.0);
        assert!((w0 - (-16.0f64).exp()).abs() < 1e-20);
        let mut previous = 2.0;
        for m in (0..=8).rev() {
            let mask: Vec<bool> = (0..8).map(|i| i < m).collect();
            let w = perturbation_weight(&mask, 0.25).unwrap().1;
            assert!(w < previous);
            previous = w;
        }
        assert!(perturbation_weight(&[true], 0.0).is_err());
    }

    #[test]
    fn constant_black_box_has_no_signal() {
        let masks = sample_perturbations(6, 150, 1).unwrap();
        let preds = vec![[0.3, 0.7]; 150];
        let batch = PerturbationBatch::new(masks, preds, 0.25, 1).unwrap();
        let s = fit_surrogate(&batch, 1).unwrap();
        assert!(s.coefficients.iter().all(|c| c.abs() < 1e-6), "{:?}", s.coefficients);
        assert!((s.intercept - 0.7).abs() < 1e-6);
    }

    #[test]
    fn planted_single_superpixel_is_recovered() {
        let masks = sample_perturbations(8, 150, 2).unwrap();
        let preds: Vec<[f64; 2]> = masks
            .iter()
            .map(|m| {
                let y = f64::from(u8::from(m[3]));
                [1.0 - y, y]
            })
            .collect();
        let batch = PerturbationBatch::new(masks, preds, 0.25, 2).unwrap();
        let s = fit_surrogate(&batch, 1).unwrap();
        for (j, c) in s.coefficients.iter().enumerate() {
            let expected = if j == 3 { 1.0 } else { 0.0 };
            assert!((c - expected).abs() < 1e-3, "coef {j} = {c}");
        }
        assert_eq!(top_features(&s.coefficients, 4)[0], 3);
    }

    #[test]
    fn exhaustive_linear_black_box_is_exact() {
        let planted = [0.3, -0.2, 0.05, 0.0, 0.45, -0.1, 0.15, 0.25];
        let masks: Vec<Vec<bool>> = (0..256u32)
            .map(|bits| (0..8).map(|j| bits & (1 << j) != 0).collect())
            .collect();
        let rows: Vec<Vec<f64>> = masks
            .iter()
            .map(|m| m.iter().map(|&b| f64::from(u8::from(b))).collect())
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 0.1 + r.iter().zip(&planted).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let s = weighted_ridge(&rows, &y, &[1.0; 256], SURROGATE_RIDGE).unwrap();
        for (c, p) in s.coefficients.iter().zip(planted) {
            assert!((c - p).abs() < 1e-6);
        }
        assert!((s.intercept - 0.1).abs() < 1e-6);
    }

    #[test]
    fn all_zero_weights_are_singular() {
        let rows = vec![vec![1.0], vec![0.0]];
        assert!(matches!(
            weighted_ridge(&rows, &[1.0, 0.0], &[0.0, 0.0], SURROGATE_RIDGE),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn top_features_order_and_length() {
        assert_eq!(top_features(&[0.1, 0.5, -0.2, 0.5], 3), vec![1, 3, 0]);
        assert_eq!(top_features(&[0.1], 4), vec![0]);
    }

    #[test]
    fn single_segment_explanation_is_flagged() {
        let img = Image::filled(8, 8, [0.5; 3]).unwrap();
        let seg = link_and_cut(
            &crate::segmentation::pixel_features(&img, 0.2).unwrap(),
            &[1.0; 64],
            8,
            8,
            100.0,
            8,
        )
        .unwrap();
        assert_eq!(seg.n_segments, 1);
        let model = FnClassifier(|_: &Image| [0.4, 0.6]);
        let exp = explain_segmented(&model, &img, &seg, &LimeParams::default()).unwrap();
        assert_eq!(exp.top_features, vec![0]);
        assert_eq!(exp.warnings.len(), 1);
        assert_eq!(exp.class_index, 1);
    }

    #[test]
    fn explanation_is_deterministic_for_a_seed() {
        let img = gradient_image(16, 16);
        let model = FnClassifier(|im: &Image| {
            let v = im.get(2, 2, 0);
            [1.0 - v, v]
        });
        let params = QuickShiftParams {
            kernel_size: 1.0,
            max_dist: 6.0,
            ratio: 0.5,
            ..Default::default()
        };
        let lime = LimeParams {
            seed: 5,
            ..Default::default()
        };
        let a = explain(&model, &img, &params, &lime).unwrap();
        assert_eq!(a, explain(&model, &img, &params, &lime).unwrap());
        assert_eq!(a.top_features.len(), a.n_segments.min(4));
    }
}

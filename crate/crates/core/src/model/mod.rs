//! Backbone registry, frozen feature extractors and the trainable
//! three-layer classification head.
//!
//! A [`ClassifierModel`] is `backbone → global average pool → d1 → d2 → d3`,
//! where `d1` and `d2` use [`activation`] and `d3` feeds a 2-way softmax.
//! Only the head is ever updated; the backbone checksum can be compared
//! before and after training to confirm that.

pub mod layers;
pub mod reference;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Tensor;
pub use layers::{Conv2d, Dense, Layer, LayerKind, Padding};
pub use reference::{activation, activation_slope, conv2d_reference, Grid, NEGATIVE_SLOPE};

/// Environment variable naming the directory that holds converted backbone weights.
pub const WEIGHTS_DIR_ENV: &str = "COVIDSCREEN_WEIGHTS_DIR";

/// Default convolution filter size of the built-in feature extractor.
pub const DEFAULT_FILTER_SIZE: usize = 3;
/// Default max-pooling window of the built-in feature extractor.
pub const DEFAULT_POOL_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneName {
    VGG16,
    InceptionResNetV2,
    ResNet50,
    DenseNet201,
    VGG19,
    MobileNetV2,
    NasNetMobile,
    ResNet15V2,
    TinyCNN,
}

impl BackboneName {
    pub const ALL: [BackboneName; 9] = [
        BackboneName::VGG16,
        BackboneName::InceptionResNetV2,
        BackboneName::ResNet50,
        BackboneName::DenseNet201,
        BackboneName::VGG19,
        BackboneName::MobileNetV2,
        BackboneName::NasNetMobile,
        BackboneName::ResNet15V2,
        BackboneName::TinyCNN,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::VGG16 => "VGG16",
            BackboneName::InceptionResNetV2 => "InceptionResNetV2",
            BackboneName::ResNet50 => "ResNet50",
            BackboneName::DenseNet201 => "DenseNet201",
            BackboneName::VGG19 => "VGG19",
            BackboneName::MobileNetV2 => "MobileNetV2",
            BackboneName::NasNetMobile => "NasNetMobile",
            BackboneName::ResNet15V2 => "ResNet15V2",
            BackboneName::TinyCNN => "TinyCNN",
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownBackbone(s.to_string()))
    }
}

/// Per-channel `(x − mean) / std` applied to `[0, 1]` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
    /// Scales `[0, 1]` to `[−1, 1]`.
    pub const SYMMETRIC: Normalization = Normalization {
        mean: [0.5; 3],
        std: [0.5; 3],
    };
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneName,
    /// `(height, width, channels)`
    pub input_shape: (usize, usize, usize),
    pub feature_dim: usize,
    pub normalization: Normalization,
    /// Identifier of the pre-trained weights, or `"scratch"`.
    pub weights_source: String,
}

impl BackboneSpec {
    pub fn requires_download(&self) -> bool {
        self.weights_source != "scratch"
    }
}

/// All registered backbones, one entry per name.
pub fn registry() -> Vec<BackboneSpec> {
    use BackboneName::*;
    let entry = |name, side, feature_dim, normalization, weights: &str| BackboneSpec {
        name,
        input_shape: (side, side, 3),
        feature_dim,
        normalization,
        weights_source: weights.to_string(),
    };
    vec![
        entry(VGG16, 224, 512, Normalization::IMAGENET, "vgg16_imagenet_notop"),
        entry(InceptionResNetV2, 299, 1536, Normalization::SYMMETRIC, "inception_resnet_v2_imagenet_notop"),
        entry(ResNet50, 224, 2048, Normalization::IMAGENET, "resnet50_imagenet_notop"),
        entry(DenseNet201, 224, 1920, Normalization::IMAGENET, "densenet201_imagenet_notop"),
        entry(VGG19, 224, 512, Normalization::IMAGENET, "vgg19_imagenet_notop"),
        entry(MobileNetV2, 224, 1280, Normalization::SYMMETRIC, "mobilenet_v2_imagenet_notop"),
        entry(NasNetMobile, 224, 1056, Normalization::SYMMETRIC, "nasnet_mobile_imagenet_notop"),
        entry(ResNet15V2, 224, 2048, Normalization::SYMMETRIC, "resnet152_v2_imagenet_notop"),
        entry(TinyCNN, 32, TINY_CONV2_CHANNELS, Normalization::IDENTITY, "scratch"),
    ]
}

pub fn lookup(name: &str) -> Result<BackboneSpec> {
    let name: BackboneName = name.parse()?;
    Ok(registry()
        .into_iter()
        .find(|s| s.name == name)
        .expect("every name is registered"))
}

const TINY_CONV1_CHANNELS: usize = 8;
const TINY_CONV2_CHANNELS: usize = 32;

/// Frozen convolutional feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub layers: Vec<Layer>,
}

impl Backbone {
    /// Two blocks of `3×3 conv → activation → 4×4 max-pool`, seeded He init.
    pub fn tiny(seed: u64) -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = |idx: usize, conv: Conv2d| {
            vec![
                Layer {
                    name: format!("conv{idx}"),
                    kind: LayerKind::Conv(conv),
                },
                Layer {
                    name: format!("act{idx}"),
                    kind: LayerKind::Activation,
                },
                Layer {
                    name: format!("pool{idx}"),
                    kind: LayerKind::MaxPool {
                        size: DEFAULT_POOL_SIZE,
                    },
                },
            ]
        };
        let c1 = Conv2d::he_normal(3, TINY_CONV1_CHANNELS, DEFAULT_FILTER_SIZE, Padding::Same, &mut rng);
        let c2 = Conv2d::he_normal(
            TINY_CONV1_CHANNELS,
            TINY_CONV2_CHANNELS,
            DEFAULT_FILTER_SIZE,
            Padding::Same,
            &mut rng,
        );
        let mut layers = block(1, c1);
        layers.extend(block(2, c2));
        Backbone { layers }
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer {
                name: name.to_string(),
                available: self.layer_names(),
            })
    }

    pub fn output_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        self.layers.iter().fold(input, |s, l| l.output_shape(s))
    }

    /// Outputs of every layer, in order.
    pub fn forward_all(&self, x: &Tensor) -> Vec<Tensor> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer.forward(outs.last().unwrap_or(x));
            outs.push(next);
        }
        outs
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.layers
            .iter()
            .fold(x.clone(), |acc, layer| layer.forward(&acc))
    }

    /// SHA-256 over every parameter's bit pattern.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            hasher.update(layer.name.as_bytes());
            for p in layer.parameters() {
                hasher.update(p.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Channel-wise spatial mean.
pub fn global_average_pool(x: &Tensor) -> Vec<f64> {
    let n = (x.height * x.width).max(1) as f64;
    (0..x.channels)
        .map(|c| x.plane(c).iter().sum::<f64>() / n)
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Negative log of a probability, floored to stay finite at 0; NaN propagates.
pub(crate) fn nll(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        -p.max(f64::MIN_POSITIVE).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadWidths(pub usize, pub usize);

impl Default for HeadWidths {
    fn default() -> Self {
        HeadWidths(256, 64)
    }
}

/// The trainable `d1 → d2 → d3` head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub d1: Dense,
    pub d2: Dense,
    pub d3: Dense,
}

/// Intermediate values of one head forward pass.
#[derive(Debug, Clone)]
pub struct HeadPass {
    pub input: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Head {
    pub fn new(feature_dim: usize, widths: HeadWidths, seed: u64) -> Head {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Head {
            d1: Dense::glorot(feature_dim, widths.0, &mut rng),
            d2: Dense::glorot(widths.0, widths.1, &mut rng),
            d3: Dense::glorot(widths.1, 2, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Head {
        Head {
            d1: Dense::zeros(self.d1.inputs, self.d1.outputs),
            d2: Dense::zeros(self.d2.inputs, self.d2.outputs),
            d3: Dense::zeros(self.d3.inputs, self.d3.outputs),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d1.inputs
    }

    pub fn forward(&self, features: &[f64]) -> HeadPass {
        let z1 = self.d1.forward(features);
        let a1: Vec<f64> = z1.iter().map(|&v| activation(v)).collect();
        let z2 = self.d2.forward(&a1);
        let a2: Vec<f64> = z2.iter().map(|&v| activation(v)).collect();
        let logits = self.d3.forward(&a2);
        let probs = softmax(&logits);
        HeadPass {
            input: features.to_vec(),
            z1,
            a1,
            z2,
            a2,
            logits,
            probs,
        }
    }

    /// Backpropagates `grad_logits`, accumulating into `grads` and returning
    /// the gradient with respect to the input features.
    pub fn backward(&self, pass: &HeadPass, grad_logits: &[f64], grads: &mut Head) -> Vec<f64> {
        let g_a2 = self.d3.backward(&pass.a2, grad_logits, &mut grads.d3);
        let g_z2: Vec<f64> = g_a2
            .iter()
            .zip(&pass.z2)
            .map(|(g, &z)| g * activation_slope(z))
            .collect();
        let g_a1 = self.d2.backward(&pass.a1, &g_z2, &mut grads.d2);
        let g_z1: Vec<f64> = g_a1
            .iter()
            .zip(&pass.z1)
            .map(|(g, &z)| g * activation_slope(z))
            .collect();
        self.d1.backward(&pass.input, &g_z1, &mut grads.d1)
    }

    /// Mean categorical cross-entropy over a batch, and its gradient.
    pub fn loss_and_grad(&self, features: &[Vec<f64>], labels: &[usize]) -> (f64, Head) {
        let mut grads = self.zeros_like();
        let n = features.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let pass = self.forward(x);
            loss += nll(pass.probs[y]);
            let g: Vec<f64> = pass
                .probs
                .iter()
                .enumerate()
                .map(|(k, p)| (p - if k == y { 1.0 } else { 0.0 }) / n)
                .collect();
            self.backward(&pass, &g, &mut grads);
        }
        (loss / n, grads)
    }

    pub fn loss(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let n = features.len() as f64;
        features
            .iter()
            .zip(labels)
            .map(|(x, &y)| nll(self.forward(x).probs[y]))
            .sum::<f64>()
            / n
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn slices(&self) -> [&[f64]; 6] {
        [
            &self.d1.weights,
            &self.d1.bias,
            &self.d2.weights,
            &self.d2.bias,
            &self.d3.weights,
            &self.d3.bias,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.d1.weights,
            &mut self.d1.bias,
            &mut self.d2.weights,
            &mut self.d2.bias,
            &mut self.d3.weights,
            &mut self.d3.bias,
        ]
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&params[offset..offset + s.len()]);
            offset += s.len();
        }
    }
}

/// Where a model's backbone parameters come from, recorded so a saved model
/// can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSource {
    Scratch { seed: u64 },
    Weights { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub spec: BackboneSpec,
    pub backbone: Backbone,
    pub head: Head,
    pub source: BackboneSource,
}

/// Directory holding converted backbone weights (`COVIDSCREEN_WEIGHTS_DIR`, default `./weights`).
pub fn weights_dir() -> PathBuf {
    std::env::var_os(WEIGHTS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("weights"))
}

/// Builds a classifier, reading pre-trained weights from [`weights_dir`].
pub fn build_classifier(spec: &BackboneSpec, widths: HeadWidths, seed: u64) -> Result<ClassifierModel> {
    build_classifier_from(spec, widths, seed, &weights_dir())
}

/// Builds a classifier with an explicit weights directory.
///
/// Pre-trained backbones are read from `<dir>/<weights_source>.json`, a
/// serialized [`Backbone`] converted from the upstream checkpoint. The
/// built-in `TinyCNN` never touches the filesystem.
pub fn build_classifier_from(
    spec: &BackboneSpec,
    widths: HeadWidths,
    seed: u64,
    dir: &Path,
) -> Result<ClassifierModel> {
    let registered = registry()
        .into_iter()
        .find(|s| s.name == spec.name)
        .ok_or_else(|| Error::UnknownBackbone(spec.name.to_string()))?;
    if widths.0 == 0 || widths.1 == 0 {
        return Err(Error::param("head widths must be positive"));
    }
    let (backbone, source) = if spec.requires_download() {
        let path = dir.join(format!("{}.json", spec.weights_source));
        (load_backbone(spec, &path)?, BackboneSource::Weights { path })
    } else {
        (Backbone::tiny(seed), BackboneSource::Scratch { seed })
    };
    let (h, w, c) = spec.input_shape;
    let (out_c, _, _) = backbone.output_shape((c, h, w));
    if out_c != registered.feature_dim || out_c != spec.feature_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{} backbone features", registered.feature_dim),
            actual: format!("{out_c}"),
        });
    }
    Ok(ClassifierModel {
        spec: spec.clone(),
        backbone,
        head: Head::new(out_c, widths, seed.wrapping_add(1)),
        source,
    })
}

fn load_backbone(spec: &BackboneSpec, path: &Path) -> Result<Backbone> {
    let unavailable = |reason: String| Error::WeightsUnavailable {
        weights_source: spec.weights_source.clone(),
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| unavailable(e.to_string()))?;
    let backbone: Backbone = serde_json::from_str(&text).map_err(|e| unavailable(e.to_string()))?;
    match backbone.layers.iter().find_map(|l| match &l.kind {
        LayerKind::Conv(c) => Some(c.in_channels),
        _ => None,
    }) {
        Some(c) if c == spec.input_shape.2 => Ok(backbone),
        other => Err(unavailable(format!(
            "first convolution expects {other:?} input channels, backbone takes {}",
            spec.input_shape.2
        ))),
    }
}

impl ClassifierModel {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let (h, w, c) = self.spec.input_shape;
        (c, h, w)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            let (c, h, w) = x.shape();
            let (ec, eh, ew) = self.input_shape();
            return Err(Error::ShapeMismatch {
                expected: format!("{eh}x{ew}x{ec}"),
                actual: format!("{h}x{w}x{c}"),
            });
        }
        Ok(())
    }

    /// Pooled backbone features for one preprocessed input.
    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(global_average_pool(&self.backbone.forward(x)))
    }

    pub fn features_batch(&self, batch: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        batch.par_iter().map(|x| self.features(x)).collect()
    }

    /// `N×2` class probabilities.
    pub fn predict_proba(&self, batch: &[Tensor]) -> Result<Vec<[f64; 2]>> {
        let feats = self.features_batch(batch)?;
        Ok(feats.iter().map(|f| self.proba_from_features(f)).collect())
    }

    pub fn proba_from_features(&self, features: &[f64]) -> [f64; 2] {
        let p = self.head.forward(features).probs;
        [p[0], p[1]]
    }

    pub fn backbone_checksum(&self) -> String {
        self.backbone.checksum()
    }

    pub fn trainable_layers(&self) -> [&Dense; 3] {
        [&self.head.d1, &self.head.d2, &self.head.d3]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SavedModel {
            spec: self.spec.clone(),
            source: self.source.clone(),
            backbone_checksum: self.backbone_checksum(),
            head: self.head.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reloads a model saved by [`ClassifierModel::save`], rebuilding the
    /// backbone and verifying its checksum.
    pub fn load(path: &Path) -> Result<ClassifierModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SavedModel = serde_json::from_str(&text)?;
        let backbone = match &file.source {
            BackboneSource::Scratch { seed } => Backbone::tiny(*seed),
            BackboneSource::Weights { path } => load_backbone(&file.spec, path)?,
        };
        if backbone.checksum() != file.backbone_checksum {
            return Err(Error::WeightsUnavailable {
                weights_source: file.spec.weights_source.clone(),
                path: path.to_path_buf(),
                reason: "backbone checksum differs from the saved model".into(),
            });
        }
        Ok(ClassifierModel {
            spec: file.spec,
            backbone,
            head: file.head,
            source: file.source,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    spec: BackboneSpec,
    source: BackboneSource,
    backbone_checksum: String,
    head: Head,
}

//! Layer heatmaps, overlays and training-curve plots.
//!
//! Plots are rasterised directly into RGB buffers: axes, light gridlines and
//! one polyline per series (training in blue, validation in orange). They
//! carry no text, so the file name identifies the figure.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{bilinear_resize, Image, Tensor};
use crate::model::{global_average_pool, Backbone, ClassifierModel, LayerKind};
use crate::training::EpochTrace;

/// One normalized map over the input grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub layer: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// The raw map was identically zero (or constant), so it carries no spatial signal.
    pub all_zero: bool,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        (i / self.width, i % self.width)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStack {
    pub maps: Vec<Heatmap>,
}

fn min_max_normalize(values: &mut [f64]) -> bool {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if (hi - lo).is_nan() || hi - lo <= 0.0 {
        values.fill(0.0);
        return true;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    false
}

fn max_normalize(values: &mut [f64]) -> bool {
    let hi = values.iter().copied().fold(0.0, f64::max);
    if hi.is_nan() || hi <= 0.0 {
        values.fill(0.0);
        return true;
    }
    values.iter_mut().for_each(|v| *v /= hi);
    false
}

/// Rectified channel mean of each selected layer's output, upsampled to the
/// input size and min-max normalized.
pub fn activation_maps(backbone: &Backbone, input: &Tensor, layers: &[String]) -> Result<HeatmapStack> {
    let indices = layers
        .iter()
        .map(|name| backbone.layer_index(name))
        .collect::<Result<Vec<_>>>()?;
    let outputs = backbone.forward_all(input);
    let maps = indices
        .iter()
        .zip(layers)
        .map(|(&i, name)| {
            let out = &outputs[i];
            let mean: Vec<f64> = out.channel_mean().into_iter().map(|v| v.max(0.0)).collect();
            let mut values = bilinear_resize(&mean, out.height, out.width, input.height, input.width);
            let all_zero = min_max_normalize(&mut values);
            Heatmap {
                layer: name.clone(),
                height: input.height,
                width: input.width,
                values,
                all_zero,
            }
        })
        .collect();
    Ok(HeatmapStack { maps })
}

/// Gradient-weighted class activation map at `layer`.
///
/// The class score is the head's pre-softmax logit for `class_index`. Each
/// channel of the layer output is weighted by the spatial mean of the
/// score's gradient, the weighted sum is rectified, upsampled to the input
/// size and divided by its maximum.
pub fn gradient_weighted_map(
    model: &ClassifierModel,
    input: &Tensor,
    class_index: usize,
    layer: &str,
) -> Result<Heatmap> {
    let backbone = &model.backbone;
    let target = backbone.layer_index(layer)?;
    if let LayerKind::MaxPool { .. } = backbone.layers[target].kind {
        return Err(Error::NotDifferentiable(format!(
            "`{layer}` is a pooling layer; choose a convolution or activation layer"
        )));
    }
    let logits_len = model.head.d3.outputs;
    if class_index >= logits_len {
        return Err(Error::param(format!("class index {class_index} out of range")));
    }
    let outputs = backbone.forward_all(input);
    let last = outputs.last().ok_or(Error::Empty("backbone layers"))?;
    let features = global_average_pool(last);
    if features.len() != model.head.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} backbone channels", model.head.input_dim()),
            actual: format!("{} channels", features.len()),
        });
    }
    let pass = model.head.forward(&features);
    let mut one_hot = vec![0.0; logits_len];
    one_hot[class_index] = 1.0;
    let mut scratch = model.head.zeros_like();
    let d_features = model.head.backward(&pass, &one_hot, &mut scratch);

    // Through global average pooling.
    let area = (last.height * last.width) as f64;
    let mut grad = Tensor::zeros(last.channels, last.height, last.width);
    for (c, g) in d_features.iter().enumerate() {
        grad.plane_mut(c).fill(g / area);
    }
    for i in (target + 1..backbone.layers.len()).rev() {
        grad = backbone.layers[i].backward_input(&outputs[i - 1], &grad);
    }

    let activations = &outputs[target];
    let plane = activations.height * activations.width;
    let mut cam = vec![0.0; plane];
    for c in 0..activations.channels {
        let weight = grad.plane(c).iter().sum::<f64>() / plane as f64;
        for (m, a) in cam.iter_mut().zip(activations.plane(c)) {
            *m += weight * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = bilinear_resize(&cam, activations.height, activations.width, input.height, input.width);
    let all_zero = max_normalize(&mut values);
    Ok(Heatmap {
        layer: layer.to_string(),
        height: input.height,
        width: input.width,
        values,
        all_zero,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Jet,
    Hot,
    Gray,
}

impl Colormap {
    pub fn color(self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        let c = |x: f64| x.clamp(0.0, 1.0);
        match self {
            Colormap::Jet => [
                c(1.5 - (4.0 * v - 3.0).abs()),
                c(1.5 - (4.0 * v - 2.0).abs()),
                c(1.5 - (4.0 * v - 1.0).abs()),
            ],
            Colormap::Hot => [c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)],
            Colormap::Gray => [v, v, v],
        }
    }
}

impl std::str::FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jet" => Ok(Colormap::Jet),
            "hot" => Ok(Colormap::Hot),
            "gray" | "grey" => Ok(Colormap::Gray),
            other => Err(Error::param(format!("unknown colormap `{other}`"))),
        }
    }
}

/// What to paint over the input image.
#[derive(Debug, Clone, Copy)]
pub enum Overlay<'a> {
    /// A `[0,1]` map, resized bilinearly to the image if needed.
    Heatmap(&'a Heatmap, Colormap),
    /// Pixels to tint, raster order at image resolution.
    Mask(&'a [bool], [f64; 3]),
}

pub const MASK_TINT: [f64; 3] = [0.1, 0.9, 0.2];

/// Alpha-blends `overlay` onto `image`.
pub fn overlay_image(image: &Image, overlay: Overlay<'_>, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha must lie in [0,1]"));
    }
    let (h, w) = (image.height(), image.width());
    let rgb = image.to_rgb();
    let blend = |px: &[f64], color: [f64; 3]| {
        [0, 1, 2].map(|k| (1.0 - alpha) * px[k] + alpha * color[k])
    };
    match overlay {
        Overlay::Heatmap(map, cmap) => {
            let values = bilinear_resize(&map.values, map.height, map.width, h, w);
            Image::from_fn(h, w, |r, c| {
                let i = r * w + c;
                blend(rgb.pixel(i), cmap.color(values[i]))
            })
        }
        Overlay::Mask(mask, tint) => {
            if mask.len() != h * w {
                return Err(Error::LengthMismatch {
                    left: mask.len(),
                    right: h * w,
                });
            }
            Image::from_fn(h, w, |r, c| {
                let i = r * w + c;
                let px = rgb.pixel(i);
                if mask[i] {
                    blend(px, tint)
                } else {
                    [px[0], px[1], px[2]]
                }
            })
        }
    }
}

/// Blends and writes a PNG.
pub fn render_overlay(image: &Image, overlay: Overlay<'_>, alpha: f64, output: &Path) -> Result<()> {
    overlay_image(image, overlay, alpha)?.save_png(output)
}

/// `<run_id>_<kind>_<subject>.png` with path-hostile characters replaced.
pub fn figure_name(run_id: &str, kind: &str, subject: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect()
    };
    format!("{}_{}_{}.png", clean(run_id), clean(kind), clean(subject))
}

const PANEL_W: u32 = 320;
const PANEL_H: u32 = 240;
const MARGIN: u32 = 24;
const TRAIN_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
const VAL_COLOR: Rgb<u8> = Rgb([255, 127, 14]);
const AXIS_COLOR: Rgb<u8> = Rgb([40, 40, 40]);
const GRID_COLOR: Rgb<u8> = Rgb([225, 225, 225]);

struct Panel {
    x0: u32,
    y0: u32,
}

impl Panel {
    fn plot_area(&self) -> (f64, f64, f64, f64) {
        let left = (self.x0 + MARGIN) as f64;
        let top = (self.y0 + MARGIN / 2) as f64;
        let right = (self.x0 + PANEL_W - MARGIN / 2) as f64;
        let bottom = (self.y0 + PANEL_H - MARGIN) as f64;
        (left, top, right, bottom)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Bresenham segment, drawn `thickness` pixels tall.
fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>, thickness: i64) {
    let (mut x, mut y) = (x0.round() as i64, y0.round() as i64);
    let (x1, y1) = (x1.round() as i64, y1.round() as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        for t in 0..thickness {
            put(img, x, y + t - thickness / 2, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_panel(img: &mut RgbImage, panel: &Panel, series: [&[f64]; 2], y_max: f64) {
    let (left, top, right, bottom) = panel.plot_area();
    for k in 1..5 {
        let y = bottom - (bottom - top) * k as f64 / 4.0;
        line(img, (left, y), (right, y), GRID_COLOR, 1);
    }
    line(img, (left, top), (left, bottom), AXIS_COLOR, 1);
    line(img, (left, bottom), (right, bottom), AXIS_COLOR, 1);
    for (values, color) in series.into_iter().zip([TRAIN_COLOR, VAL_COLOR]) {
        let n = values.len();
        let point = |i: usize| {
            let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let fy = (values[i] / y_max).clamp(0.0, 1.0);
            (left + fx * (right - left), bottom - fy * (bottom - top))
        };
        if n == 1 {
            let p = point(0);
            line(img, (p.0 - 3.0, p.1), (p.0 + 3.0, p.1), color, 2);
        }
        for i in 1..n {
            line(img, point(i - 1), point(i), color, 2);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TraceKind {
    Accuracy,
    Loss,
}

impl TraceKind {
    fn name(self) -> &'static str {
        match self {
            TraceKind::Accuracy => "accuracy",
            TraceKind::Loss => "loss",
        }
    }

    fn series(self, t: &EpochTrace) -> [&[f64]; 2] {
        match self {
            TraceKind::Accuracy => [&t.train_accuracy, &t.val_accuracy],
            TraceKind::Loss => [&t.train_loss, &t.val_loss],
        }
    }

    fn y_max(self, t: &EpochTrace) -> f64 {
        match self {
            TraceKind::Accuracy => 1.0,
            TraceKind::Loss => {
                let m = t.train_loss.iter().chain(&t.val_loss).copied().fold(0.0, f64::max);
                if m > 0.0 {
                    m * 1.05
                } else {
                    1.0
                }
            }
        }
    }
}

fn render_grid(traces: &[(&str, &EpochTrace)], kind: TraceKind) -> RgbImage {
    let cols = traces.len().min(4) as u32;
    let rows = (traces.len() as u32).div_ceil(cols);
    let mut img = RgbImage::from_pixel(cols * PANEL_W, rows * PANEL_H, Rgb([255, 255, 255]));
    for (i, (_, t)) in traces.iter().enumerate() {
        let panel = Panel {
            x0: (i as u32 % cols) * PANEL_W,
            y0: (i as u32 / cols) * PANEL_H,
        };
        draw_panel(&mut img, &panel, kind.series(t), kind.y_max(t));
    }
    img
}

/// Writes an accuracy and a loss plot per model; with several models, also
/// one panel grid per kind (four panels per row). Returns the written paths.
pub fn plot_traces(traces: &[(&str, &EpochTrace)], run_id: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if traces.is_empty() {
        return Err(Error::Empty("trace list"));
    }
    if let Some((label, _)) = traces.iter().find(|(_, t)| t.is_empty()) {
        return Err(Error::param(format!("trace for `{label}` has no epochs")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut save = |img: RgbImage, name: String| -> Result<()> {
        let path = out_dir.join(name);
        img.save_with_format(&path, image::ImageFormat::Png)?;
        written.push(path);
        Ok(())
    };
    for kind in [TraceKind::Accuracy, TraceKind::Loss] {
        for &(label, trace) in traces {
            save(render_grid(&[(label, trace)], kind), figure_name(run_id, kind.name(), label))?;
        }
        if traces.len() > 1 {
            save(render_grid(traces, kind), figure_name(run_id, kind.name(), "grid"))?;
        }
    }
    Ok(written)
}

/// Maps a `[0,1]` heatmap to a standalone colour image.
pub fn heatmap_image(map: &Heatmap, cmap: Colormap) -> Result<Image> {
    Image::from_fn(map.height, map.width, |r, c| cmap.color(map.values[r * map.width + c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::{Conv2d, Dense, Layer, Padding};
    use crate::model::{build_classifier, lookup, Head, HeadWidths};

    fn single_conv(weights: Vec<f64>, in_c: usize, out_c: usize) -> Backbone {
        let mut conv = Conv2d::zeros(in_c, out_c, 3, Padding::Same);
        conv.weights = weights;
        Backbone {
            layers: vec![
                Layer {
                    name: "conv1".into(),
                    kind: LayerKind::Conv(conv),
                },
                Layer {
                    name: "act1".into(),
                    kind: LayerKind::Activation,
                },
                Layer {
                    name: "pool1".into(),
                    kind: LayerKind::MaxPool { size: 2 },
                },
            ],
        }
    }

    fn step_image(h: usize, w: usize, edge: usize) -> Tensor {
        let mut t = Tensor::zeros(1, h, w);
        for r in 0..h {
            for c in edge..w {
                t.data[r * w + c] = 1.0;
            }
        }
        t
    }

    #[test]
    fn zero_conv_gives_flagged_zero_map() {
        let bb = single_conv(vec![0.0; 9], 1, 1);
        let stack = activation_maps(&bb, &step_image(8, 8, 4), &["conv1".into(), "pool1".into()]).unwrap();
        assert_eq!(stack.maps.len(), 2);
        for m in &stack.maps {
            assert!(m.all_zero);
            assert_eq!((m.height, m.width), (8, 8));
            assert!(m.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn edge_filter_peaks_on_edge_column() {
        // Stored kernel is flipped by the convolution, so [1,0,-1] per row
        // responds with +1 per row where the intensity rises left to right.
        let k = vec![1.0, 0.0, -1.0, 1.0, 0.0, -1.0, 1.0, 0.0, -1.0];
        let bb = single_conv(k, 1, 1);
        let input = step_image(12, 12, 6);
        let map = &activation_maps(&bb, &input, &["conv1".into()]).unwrap().maps[0];
        assert!(!map.all_zero);
        assert_eq!(map.max(), 1.0);
        // Columns 5 and 6 both straddle the step; interior rows see the full response.
        for r in 1..11 {
            for c in 0..12 {
                let v = map.values[r * 12 + c];
                if c == 5 || c == 6 {
                    assert_eq!(v, 1.0, "row {r} col {c}");
                } else {
                    assert_eq!(v, 0.0, "row {r} col {c}");
                }
            }
        }
        assert!(activation_maps(&bb, &input, &["nope".into()]).is_err());
    }

    /// Backbone with one positive conv layer and a head whose class-1 logit
    /// is exactly the pooled mean of channel `k` (all positive here).
    fn planted(k: usize) -> ClassifierModel {
        let mut model = build_classifier(&lookup("TinyCNN").unwrap(), HeadWidths(3, 3), 0).unwrap();
        let channels = 3;
        let mut conv = Conv2d::zeros(1, channels, 3, Padding::Same);
        for (o, w) in conv.weights.chunks_mut(9).enumerate() {
            for (j, v) in w.iter_mut().enumerate() {
                *v = 0.1 * (o + 1) as f64 + 0.05 * j as f64;
            }
        }
        model.backbone = Backbone {
            layers: vec![Layer {
                name: "conv1".into(),
                kind: LayerKind::Conv(conv),
            }],
        };
        let identity = |n: usize| {
            let mut d = Dense::zeros(n, n);
            (0..n).for_each(|i| d.weights[i * n + i] = 1.0);
            d
        };
        let mut d3 = Dense::zeros(channels, 2);
        d3.weights[channels + k] = 1.0;
        model.head = Head {
            d1: identity(channels),
            d2: identity(channels),
            d3,
        };
        model
    }

    fn textured(h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(1, h, w);
        for r in 0..h {
            for c in 0..w {
                t.data[r * w + c] = 0.2 + 0.8 * ((r * 7 + c * 3) % 11) as f64 / 10.0;
            }
        }
        t
    }

    #[test]
    fn linear_readout_map_is_the_channel() {
        let model = planted(1);
        let input = textured(10, 10);
        let map = gradient_weighted_map(&model, &input, 1, "conv1").unwrap();
        let act = model.backbone.forward(&input);
        let channel = act.plane(1);
        let peak = channel.iter().copied().fold(0.0, f64::max);
        for (m, a) in map.values.iter().zip(channel) {
            assert!((m - a / peak).abs() < 1e-5);
        }
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn image_independent_score_gives_flagged_zero_map() {
        let mut model = planted(1);
        model.head.d3.weights.fill(0.0);
        model.head.d3.bias = vec![0.3, -0.2];
        let map = gradient_weighted_map(&model, &textured(10, 10), 0, "conv1").unwrap();
        assert!(map.all_zero);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_model_maps_are_normalized_and_input_sized() {
        let model = build_classifier(&lookup("TinyCNN").unwrap(), HeadWidths::default(), 3).unwrap();
        let input = textured(32, 32);
        let input = Tensor {
            channels: 3,
            data: input.data.repeat(3),
            ..input
        };
        for layer in ["conv1", "act1", "conv2", "act2"] {
            let m = gradient_weighted_map(&model, &input, 0, layer).unwrap();
            assert_eq!((m.height, m.width), (32, 32));
            assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(m.all_zero || (m.max() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            gradient_weighted_map(&model, &input, 0, "pool1"),
            Err(Error::NotDifferentiable(_))
        ));
        assert!(matches!(
            gradient_weighted_map(&model, &input, 0, "conv9"),
            Err(Error::UnknownLayer { .. })
        ));
    }

    #[test]
    fn overlays() {
        let img = Image::from_fn(4, 4, |r, c| [r as f64 / 4.0, c as f64 / 4.0, 0.5]).unwrap();
        let zero = Heatmap {
            layer: "x".into(),
            height: 2,
            width: 2,
            values: vec![0.0; 4],
            all_zero: true,
        };
        let out = overlay_image(&img, Overlay::Heatmap(&zero, Colormap::Jet), 0.4).unwrap();
        let low = Colormap::Jet.color(0.0);
        for i in 0..16 {
            for (k, &l) in low.iter().enumerate() {
                let expected = 0.6 * img.pixel(i)[k] + 0.4 * l;
                assert!((out.pixel(i)[k] - expected).abs() < 1e-12);
            }
        }

        let mask: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let tinted = overlay_image(&img, Overlay::Mask(&mask, MASK_TINT), 0.5).unwrap();
        for (i, &on) in mask.iter().enumerate() {
            assert_eq!(tinted.pixel(i) == img.pixel(i), !on);
        }
        assert!(overlay_image(&img, Overlay::Mask(&mask[..3], MASK_TINT), 0.5).is_err());
    }

    #[test]
    fn overlay_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(9, 7, |r, c| [r as f64 / 9.0, 0.3, c as f64 / 7.0]).unwrap();
        let map = Heatmap {
            layer: "x".into(),
            height: 3,
            width: 3,
            values: (0..9).map(|v| v as f64 / 8.0).collect(),
            all_zero: false,
        };
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        render_overlay(&img, Overlay::Heatmap(&map, Colormap::Hot), 0.5, &a).unwrap();
        render_overlay(&img, Overlay::Heatmap(&map, Colormap::Hot), 0.5, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let missing = dir.path().join("no/such/dir/c.png");
        assert!(render_overlay(&img, Overlay::Heatmap(&map, Colormap::Hot), 0.5, &missing).is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(Colormap::Gray.color(0.25), [0.25; 3]);
        assert_eq!(Colormap::Hot.color(1.0), [1.0; 3]);
        assert_eq!(Colormap::Jet.color(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(Colormap::Jet.color(1.0), [0.5, 0.0, 0.0]);
        assert_eq!("HOT".parse::<Colormap>().unwrap(), Colormap::Hot);
    }

    fn trace(n: usize, f: impl Fn(usize) -> f64) -> EpochTrace {
        EpochTrace {
            train_accuracy: (0..n).map(&f).collect(),
            train_loss: (0..n).map(|i| 1.0 - f(i)).collect(),
            val_accuracy: (0..n).map(|i| f(i) * 0.9).collect(),
            val_loss: (0..n).map(|i| 1.1 - f(i)).collect(),
        }
    }

    fn has_color(path: &Path, color: Rgb<u8>) -> bool {
        image::open(path).unwrap().to_rgb8().pixels().any(|p| *p == color)
    }

    #[test]
    fn one_model_two_files_two_curves() {
        let dir = tempfile::tempdir().unwrap();
        let t = trace(30, |i| i as f64 / 30.0);
        let files = plot_traces(&[("TinyCNN", &t)], "run1", dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[0].ends_with("run1_accuracy_TinyCNN.png"));
        assert!(files[1].ends_with("run1_loss_TinyCNN.png"));
        for f in &files {
            assert!(has_color(f, TRAIN_COLOR));
            assert!(has_color(f, VAL_COLOR));
        }
    }

    #[test]
    fn eight_models_get_panel_grids() {
        let dir = tempfile::tempdir().unwrap();
        let traces: Vec<EpochTrace> = (0..8).map(|k| trace(10, move |i| (i + k) as f64 / 20.0)).collect();
        let names: Vec<String> = (0..8).map(|k| format!("m{k}")).collect();
        let pairs: Vec<(&str, &EpochTrace)> = names.iter().map(String::as_str).zip(&traces).collect();
        let files = plot_traces(&pairs, "r", dir.path()).unwrap();
        assert_eq!(files.len(), 18);
        let grid = image::open(dir.path().join("r_accuracy_grid.png")).unwrap();
        assert_eq!((grid.width(), grid.height()), (4 * PANEL_W, 2 * PANEL_H));
    }

    #[test]
    fn constant_trace_is_plotted_and_empty_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let flat = trace(5, |_| 0.5);
        assert_eq!(plot_traces(&[("flat", &flat)], "c", dir.path()).unwrap().len(), 2);
        assert!(plot_traces(&[], "c", dir.path()).is_err());
        assert!(plot_traces(&[("e", &EpochTrace::default())], "c", dir.path()).is_err());
    }
}

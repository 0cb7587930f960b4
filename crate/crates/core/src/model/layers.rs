//! Feature-extractor and head layers with the forward/backward passes needed
//! for head training and gradient-weighted heatmaps.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::reference::{activation, activation_slope};
use crate::image::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Multi-channel convolution following the flipped-kernel definition of
/// [`super::reference::conv2d_reference`], stride 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    /// `[out][in][m][n]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize, padding: Padding) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            padding,
            weights: vec![0.0; out_channels * in_channels * kernel_size * kernel_size],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal initialisation.
    pub fn he_normal<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel_size, padding);
        let fan_in = (in_channels * kernel_size * kernel_size) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        conv.weights.iter_mut().for_each(|w| *w = normal.sample(rng));
        conv
    }

    fn offset(&self) -> usize {
        match self.padding {
            Padding::Valid => self.kernel_size - 1,
            Padding::Same => (self.kernel_size - 1) / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (
                (h + 1).saturating_sub(self.kernel_size),
                (w + 1).saturating_sub(self.kernel_size),
            ),
            Padding::Same => (h, w),
        }
    }

    #[inline]
    fn weight(&self, o: usize, c: usize, m: usize, n: usize) -> f64 {
        let k = self.kernel_size;
        self.weights[((o * self.in_channels + c) * k + m) * k + n]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        let off = self.offset() as isize;
        for o in 0..self.out_channels {
            let plane = out.plane_mut(o);
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for c in 0..self.in_channels {
                let src = x.plane(c);
                for m in 0..self.kernel_size {
                    for n in 0..self.kernel_size {
                        let w = self.weight(o, c, m, n);
                        if w == 0.0 {
                            continue;
                        }
                        for r in 0..oh {
                            let xr = r as isize + off - m as isize;
                            if xr < 0 || xr >= x.height as isize {
                                continue;
                            }
                            let src_row = &src[xr as usize * x.width..][..x.width];
                            let dst_row = &mut plane[r * ow..][..ow];
                            for (col, d) in dst_row.iter_mut().enumerate() {
                                let xc = col as isize + off - n as isize;
                                if xc >= 0 && xc < x.width as isize {
                                    *d += w * src_row[xc as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient of a scalar objective with respect to the layer input.
    pub fn backward_input(&self, input_shape: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
        let (_, h, w) = input_shape;
        let mut grad_in = Tensor::zeros(self.in_channels, h, w);
        let off = self.offset() as isize;
        let (oh, ow) = (grad_out.height, grad_out.width);
        for o in 0..self.out_channels {
            let g = grad_out.plane(o);
            for c in 0..self.in_channels {
                let dst = grad_in.plane_mut(c);
                for m in 0..self.kernel_size {
                    for n in 0..self.kernel_size {
                        let wt = self.weight(o, c, m, n);
                        if wt == 0.0 {
                            continue;
                        }
                        for r in 0..oh {
                            let xr = r as isize + off - m as isize;
                            if xr < 0 || xr >= h as isize {
                                continue;
                            }
                            for col in 0..ow {
                                let xc = col as isize + off - n as isize;
                                if xc >= 0 && xc < w as isize {
                                    dst[xr as usize * w + xc as usize] += wt * g[r * ow + col];
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Layer kinds available to a feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv(Conv2d),
    Activation,
    MaxPool { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        match &self.kind {
            LayerKind::Conv(conv) => conv.forward(x),
            LayerKind::Activation => Tensor {
                data: x.data.iter().map(|&v| activation(v)).collect(),
                ..x.clone()
            },
            LayerKind::MaxPool { size } => max_pool(x, *size),
        }
    }

    /// Maps the gradient at this layer's output back to its input.
    pub fn backward_input(&self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        match &self.kind {
            LayerKind::Conv(conv) => conv.backward_input(input.shape(), grad_out),
            LayerKind::Activation => Tensor {
                data: input
                    .data
                    .iter()
                    .zip(&grad_out.data)
                    .map(|(&x, &g)| g * activation_slope(x))
                    .collect(),
                ..input.clone()
            },
            LayerKind::MaxPool { size } => max_pool_backward(input, grad_out, *size),
        }
    }

    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        match &self.kind {
            LayerKind::Conv(conv) => {
                let (oh, ow) = conv.output_size(h, w);
                (conv.out_channels, oh, ow)
            }
            LayerKind::Activation => (c, h, w),
            LayerKind::MaxPool { size } => (c, h / size, w / size),
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        let slices: [&[f64]; 2] = match &self.kind {
            LayerKind::Conv(conv) => [&conv.weights, &conv.bias],
            _ => [&[], &[]],
        };
        slices.into_iter().flatten().copied()
    }
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped.
pub fn max_pool(x: &Tensor, size: usize) -> Tensor {
    let (oh, ow) = (x.height / size, x.width / size);
    let mut out = Tensor::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        for r in 0..oh {
            for col in 0..ow {
                out.data[(c * oh + r) * ow + col] = argmax_window(x, c, r, col, size).1;
            }
        }
    }
    out
}

/// First maximum of a pooling window in raster order.
fn argmax_window(x: &Tensor, c: usize, r: usize, col: usize, size: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for dr in 0..size {
        for dc in 0..size {
            let idx = (c * x.height + r * size + dr) * x.width + col * size + dc;
            if x.data[idx] > best.1 {
                best = (idx, x.data[idx]);
            }
        }
    }
    best
}

fn max_pool_backward(input: &Tensor, grad_out: &Tensor, size: usize) -> Tensor {
    let mut grad_in = Tensor::zeros(input.channels, input.height, input.width);
    let (oh, ow) = (grad_out.height, grad_out.width);
    for c in 0..input.channels {
        for r in 0..oh {
            for col in 0..ow {
                let (idx, _) = argmax_window(input, c, r, col, size);
                grad_in.data[idx] += grad_out.data[(c * oh + r) * ow + col];
            }
        }
    }
    grad_in
}

/// Fully connected layer, `weights` stored `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform initialisation, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        d.weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-limit..limit));
        d
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            grad.bias[o] += g;
            let row = &self.weights[o * self.inputs..][..self.inputs];
            let grow = &mut grad.weights[o * self.inputs..][..self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

//! Pixel containers shared by every stage of the pipeline.
//!
//! [`Image`] stores interleaved `H×W×C` values in `[0, 1]` and is what the
//! dataset loader, quick shift and the LIME perturbations operate on.
//! [`Tensor`] is the planar `C×H×W` layout consumed by the network layers.

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from interleaved row-major data.
    ///
    /// Values are validated to lie in `[0, 1]` and `channels` must be 1 or 3.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::param(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::param("image dimensions must be non-zero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}x{channels}"),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, 3, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(height, width, 3, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub(crate) fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    /// Replicates a single channel into RGB; RGB images are returned as-is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Image {
        let rgb = img.to_rgb8();
        let data = rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Image {
            height: rgb.height() as usize,
            width: rgb.width() as usize,
            channels: 3,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let rgb = self.to_rgb();
        let raw = rgb.data.iter().map(|&v| to_byte(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Decodes an image file and converts it to RGB.
    pub fn open(path: &Path) -> Result<Image> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(Image::from_dynamic(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }

    /// Triangle-filter resize to `(height, width)`.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.to_rgb();
        }
        let buf = image::Rgb32FImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.to_rgb().data.iter().map(|&v| v as f32).collect(),
        )
        .expect("buffer length matches dimensions");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let data = out
            .as_raw()
            .iter()
            .map(|&v| f64::from(v).clamp(0.0, 1.0))
            .collect();
        Image {
            height,
            width,
            channels: 3,
            data,
        }
    }
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar `C×H×W` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[channel * n..(channel + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    /// Converts an interleaved image into planar layout without normalization.
    pub fn from_image(img: &Image) -> Tensor {
        let mut t = Tensor::zeros(img.channels(), img.height(), img.width());
        let n = img.pixel_count();
        for (i, px) in img.data().chunks_exact(img.channels()).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                t.data[c * n + i] = v;
            }
        }
        t
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = self.channels.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}

/// Bilinear resampling of a single-channel map (pixel-centre alignment).
pub fn bilinear_resize(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    if src_h == dst_h && src_w == dst_w {
        return src.to_vec();
    }
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for r in 0..dst_h {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f64;
        for c in 0..dst_w {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bottom = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

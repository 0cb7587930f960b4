//! Quick-shift superpixels.
//!
//! Every pixel is mapped to a feature vector `[ratio·255·rgb, row, col]`.
//! A Parzen density is estimated with a Gaussian of bandwidth `kernel_size`
//! over a `⌈3·kernel_size⌉` window. Each pixel is then linked to the nearest
//! (in feature space) pixel that ranks above it, and links longer than
//! `max_dist` are cut. The remaining trees are the superpixels.
//!
//! Pixels are ranked by density, with equal densities ordered by raster
//! index (earlier ranks higher), so plateaus still resolve to a single mode
//! and the output is fully deterministic.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Feature vector of one pixel: three scaled colour terms then row and column.
pub type PixelFeature = [f64; 5];

/// Neighbourhood searched for a pixel's parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentSearch {
    /// Same `⌈3·kernel_size⌉` window as the density estimate.
    #[default]
    KernelWindow,
    /// Window of radius `⌈max_dist⌉`: every link that could survive the cut.
    MaxDist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuickShiftParams {
    pub kernel_size: f64,
    pub max_dist: f64,
    pub ratio: f64,
    #[serde(default)]
    pub parent_search: ParentSearch,
}

impl Default for QuickShiftParams {
    fn default() -> Self {
        Self {
            kernel_size: 4.0,
            max_dist: 200.0,
            ratio: 0.2,
            parent_search: ParentSearch::KernelWindow,
        }
    }
}

impl QuickShiftParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_size > 0.0 && self.kernel_size.is_finite()) {
            return Err(Error::param(format!(
                "kernel_size must be positive, got {}",
                self.kernel_size
            )));
        }
        if self.max_dist.is_nan() || self.max_dist <= 0.0 {
            return Err(Error::param(format!(
                "max_dist must be positive, got {}",
                self.max_dist
            )));
        }
        check_ratio(self.ratio)
    }

    fn density_radius(&self) -> usize {
        (3.0 * self.kernel_size).ceil() as usize
    }

    fn search_radius(&self) -> usize {
        match self.parent_search {
            ParentSearch::KernelWindow => self.density_radius(),
            ParentSearch::MaxDist => self.max_dist.ceil().min(usize::MAX as f64) as usize,
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("ratio must be in (0, 1], got {ratio}")))
    }
}

/// `[ratio·255·r, ratio·255·g, ratio·255·b, row, col]` per pixel, raster order.
pub fn pixel_features(image: &Image, ratio: f64) -> Result<Vec<PixelFeature>> {
    check_ratio(ratio)?;
    let rgb = image.to_rgb();
    let scale = ratio * 255.0;
    Ok((0..rgb.pixel_count())
        .map(|i| {
            let px = rgb.pixel(i);
            [
                scale * px[0],
                scale * px[1],
                scale * px[2],
                (i / rgb.width()) as f64,
                (i % rgb.width()) as f64,
            ]
        })
        .collect())
}

#[inline]
fn dist2(a: &PixelFeature, b: &PixelFeature) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian Parzen density over a square window of radius `⌈3·kernel_size⌉`.
pub fn estimate_density(
    features: &[PixelFeature],
    height: usize,
    width: usize,
    kernel_size: f64,
) -> Result<Vec<f64>> {
    if kernel_size.is_nan() || kernel_size <= 0.0 {
        return Err(Error::param("kernel_size must be positive"));
    }
    check_len(features.len(), height, width)?;
    let radius = (3.0 * kernel_size).ceil() as usize;
    let inv = 1.0 / (2.0 * kernel_size * kernel_size);
    Ok((0..height * width)
        .into_par_iter()
        .map(|p| {
            let (r, c) = (p / width, p % width);
            let mut total = 0.0;
            for qr in r.saturating_sub(radius)..(r + radius + 1).min(height) {
                for qc in c.saturating_sub(radius)..(c + radius + 1).min(width) {
                    total += (-dist2(&features[p], &features[qr * width + qc]) * inv).exp();
                }
            }
            total
        })
        .collect())
}

fn check_len(len: usize, height: usize, width: usize) -> Result<()> {
    if len != height * width || len == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("{height}x{width} features"),
            actual: format!("{len}"),
        });
    }
    Ok(())
}

/// `true` when pixel `q` ranks strictly above pixel `p`.
#[inline]
fn ranks_above(density: &[f64], q: usize, p: usize) -> bool {
    match density[q].partial_cmp(&density[p]) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => q < p,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelSegmentation {
    pub height: usize,
    pub width: usize,
    /// Segment id per pixel, raster order, ids in `[0, n_segments)`.
    pub labels: Vec<usize>,
    pub n_segments: usize,
    /// Parent pixel index; roots point at themselves.
    pub parent: Vec<usize>,
    pub density: Vec<f64>,
    /// Feature distance to the parent (0 for roots).
    pub parent_distance: Vec<f64>,
}

/// Links each pixel to its nearest higher-ranked neighbour and cuts links
/// longer than `max_dist`.
pub fn link_and_cut(
    features: &[PixelFeature],
    density: &[f64],
    height: usize,
    width: usize,
    max_dist: f64,
    search_radius: usize,
) -> Result<SuperpixelSegmentation> {
    check_len(features.len(), height, width)?;
    if density.len() != features.len() {
        return Err(Error::LengthMismatch {
            left: density.len(),
            right: features.len(),
        });
    }
    let max_d2 = max_dist * max_dist;
    let links: Vec<(usize, f64)> = (0..height * width)
        .into_par_iter()
        .map(|p| {
            let (r, c) = (p / width, p % width);
            let mut best: Option<(f64, usize)> = None;
            let max_ring = search_radius.min(height.max(width));
            for ring in 1..=max_ring {
                // feature distance ≥ spatial distance ≥ ring
                if let Some((d2, _)) = best {
                    if (ring * ring) as f64 > d2 {
                        break;
                    }
                }
                for_each_in_ring(r, c, ring, height, width, |q| {
                    if ranks_above(density, q, p) {
                        let d2 = dist2(&features[p], &features[q]);
                        let better = match best {
                            None => true,
                            Some((bd, bq)) => d2 < bd || (d2 == bd && q < bq),
                        };
                        if better {
                            best = Some((d2, q));
                        }
                    }
                });
            }
            match best {
                Some((d2, q)) if d2 <= max_d2 => (q, d2.sqrt()),
                _ => (p, 0.0),
            }
        })
        .collect();
    let parent: Vec<usize> = links.iter().map(|l| l.0).collect();
    let parent_distance: Vec<f64> = links.iter().map(|l| l.1).collect();

    // Parents rank above children, so visiting in rank order labels every
    // parent before its children.
    let mut order: Vec<usize> = (0..parent.len()).collect();
    order.sort_by(|&a, &b| {
        density[b]
            .partial_cmp(&density[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut root_label = vec![usize::MAX; parent.len()];
    let mut next = 0;
    for p in (0..parent.len()).filter(|&p| parent[p] == p) {
        root_label[p] = next;
        next += 1;
    }
    let mut labels = vec![usize::MAX; parent.len()];
    for &p in &order {
        labels[p] = if parent[p] == p {
            root_label[p]
        } else {
            labels[parent[p]]
        };
    }
    debug_assert!(labels.iter().all(|&l| l < next));
    Ok(SuperpixelSegmentation {
        height,
        width,
        labels,
        n_segments: next,
        parent,
        density: density.to_vec(),
        parent_distance,
    })
}

fn for_each_in_ring(
    r: usize,
    c: usize,
    ring: usize,
    height: usize,
    width: usize,
    mut f: impl FnMut(usize),
) {
    let (r, c, ring) = (r as isize, c as isize, ring as isize);
    let (h, w) = (height as isize, width as isize);
    let mut visit = |rr: isize, cc: isize| {
        if rr >= 0 && rr < h && cc >= 0 && cc < w {
            f((rr * w + cc) as usize);
        }
    };
    for cc in c - ring..=c + ring {
        visit(r - ring, cc);
        visit(r + ring, cc);
    }
    for rr in r - ring + 1..r + ring {
        visit(rr, c - ring);
        visit(rr, c + ring);
    }
}

/// Full quick-shift segmentation of `image`.
pub fn quickshift(image: &Image, params: &QuickShiftParams) -> Result<SuperpixelSegmentation> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let features = pixel_features(image, params.ratio)?;
    let density = estimate_density(&features, h, w, params.kernel_size)?;
    link_and_cut(&features, &density, h, w, params.max_dist, params.search_radius())
}

/// Serialized form: dimensions plus `(label, run_length)` pairs in raster order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationRle {
    pub height: usize,
    pub width: usize,
    pub n_segments: usize,
    pub runs: Vec<(usize, usize)>,
}

impl SegmentationRle {
    pub fn decode(&self) -> Vec<usize> {
        self.runs
            .iter()
            .flat_map(|&(label, len)| std::iter::repeat_n(label, len))
            .collect()
    }
}

impl SuperpixelSegmentation {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_segments];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.parent.len()).filter(|&p| self.parent[p] == p)
    }

    /// Checks the partition, rank-monotone parent and link-length invariants.
    pub fn check_invariants(&self, max_dist: f64) -> std::result::Result<(), String> {
        if self.labels.len() != self.height * self.width {
            return Err("label map has the wrong size".into());
        }
        if let Some(p) = self.labels.iter().position(|&l| l >= self.n_segments) {
            return Err(format!("pixel {p} has out-of-range label"));
        }
        if self.segment_sizes().contains(&0) {
            return Err("empty segment id".into());
        }
        for (p, &q) in self.parent.iter().enumerate() {
            if q == p {
                continue;
            }
            if !ranks_above(&self.density, q, p) {
                return Err(format!("parent of {p} does not rank above it"));
            }
            if self.parent_distance[p] > max_dist {
                return Err(format!("link of {p} exceeds max_dist"));
            }
            if self.labels[p] != self.labels[q] {
                return Err(format!("pixel {p} and its parent have different labels"));
            }
        }
        if self.roots().count() != self.n_segments {
            return Err("segment count differs from root count".into());
        }
        Ok(())
    }

    pub fn to_rle(&self) -> SegmentationRle {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &l in &self.labels {
            match runs.last_mut() {
                Some((label, len)) if *label == l => *len += 1,
                _ => runs.push((l, 1)),
            }
        }
        SegmentationRle {
            height: self.height,
            width: self.width,
            n_segments: self.n_segments,
            runs,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_rle())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Each segment painted with its mean colour in `image`, boundaries in black.
    pub fn visualize(&self, image: &Image) -> Result<Image> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.height, self.width),
                actual: format!("{}x{}", image.height(), image.width()),
            });
        }
        let means = segment_means(image, self);
        let w = self.width;
        Image::from_fn(self.height, self.width, |r, c| {
            let l = self.labels[r * w + c];
            let boundary = (c + 1 < w && self.labels[r * w + c + 1] != l)
                || (r + 1 < self.height && self.labels[(r + 1) * w + c] != l);
            if boundary {
                [0.0; 3]
            } else {
                means[l]
            }
        })
    }

    pub fn save_png(&self, image: &Image, path: &Path) -> Result<()> {
        self.visualize(image)?.save_png(path)
    }
}

/// Mean RGB colour of every segment.
pub fn segment_means(image: &Image, seg: &SuperpixelSegmentation) -> Vec<[f64; 3]> {
    let rgb = image.to_rgb();
    let mut sums = vec![[0.0; 3]; seg.n_segments];
    let mut counts = vec![0usize; seg.n_segments];
    for (i, &l) in seg.labels.iter().enumerate() {
        let px = rgb.pixel(i);
        for ch in 0..3 {
            sums[l][ch] += px[ch];
        }
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| s.map(|v| v / n.max(1) as f64))
        .collect()
}

//! Per-pixel saliency maps and their on-disk form (16-bit PNG plus a JSON
//! sidecar).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XfrError};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    RawProbability,
    MaxNormalized,
}

/// Non-negative per-pixel map over a probe image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    normalization: Normalization,
}

impl SaliencyMap {
    pub fn new(
        width: usize,
        height: usize,
        values: Vec<f32>,
        normalization: Normalization,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(XfrError::LengthMismatch(width * height, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(XfrError::InvalidArgument(format!(
                "saliency values must be finite and non-negative, found {v}"
            )));
        }
        Ok(SaliencyMap {
            width,
            height,
            values,
            normalization,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        SaliencyMap {
            width,
            height,
            values: vec![0.0; width * height],
            normalization: Normalization::MaxNormalized,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Divides by the maximum so the peak is exactly 1; an all-zero map
    /// stays zero.
    pub fn max_normalized(&self) -> SaliencyMap {
        let max = self.max();
        let values = if max > 0.0 {
            self.values
                .iter()
                .map(|&v| if v == max { 1.0 } else { (v / max).min(1.0) })
                .collect()
        } else {
            self.values.clone()
        };
        SaliencyMap {
            width: self.width,
            height: self.height,
            values,
            normalization: Normalization::MaxNormalized,
        }
    }

    /// Bilinear resampling with pixel-centre alignment and edge clamping.
    pub fn resized(&self, width: usize, height: usize) -> SaliencyMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let src: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        let values = bilinear(&src, self.width, self.height, width, height)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        SaliencyMap {
            width,
            height,
            values,
            normalization: self.normalization,
        }
    }

    /// Fraction of total mass inside `mask`.
    pub fn mass_fraction(&self, mask: &io::BinaryMask) -> f64 {
        let total = self.sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = self
            .values
            .iter()
            .zip(&mask.data)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v as f64)
            .sum();
        inside / total
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        io::save_gray16(&self.max_normalized().values, self.width, self.height, path)
    }

    pub fn load_png(path: &Path) -> Result<SaliencyMap> {
        let (values, w, h) = io::load_gray16(path)?;
        SaliencyMap::new(w, h, values, Normalization::MaxNormalized)
    }
}

/// Bilinear resize of a single-channel image, pixel-centre aligned.
pub fn bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dw * dh);
    let (fx, fy) = (sw as f64 / dw as f64, sh as f64 / dh as f64);
    for y in 0..dh {
        let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = sy - y0 as f64;
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = sx - x0 as f64;
            let v = |xx: usize, yy: usize| src[yy * sw + xx];
            let top = v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx;
            let bot = v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Nearest-rank percentile: the smallest value with at least `k` percent of
/// values at or below it. `k` in `(0, 100]`.
pub fn percentile_value(values: &[f32], k: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let rank = ((k / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// JSON sidecar written next to every saliency PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMetadata {
    pub triplet: String,
    pub method: String,
    pub parameters: serde_json::Value,
    pub raw_sum: Option<f64>,
    pub dropped_mass: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Grid of grayscale maps, `cols` per row, each `scale` times enlarged.
pub fn montage(maps: &[SaliencyMap], cols: usize, scale: u32) -> image::RgbImage {
    let cols = cols.max(1);
    let (tw, th) = maps
        .first()
        .map(|m| (m.width() as u32, m.height() as u32))
        .unwrap_or((1, 1));
    let rows = maps.len().div_ceil(cols).max(1);
    let (cw, ch) = (tw * scale + 2, th * scale + 2);
    let mut img = image::RgbImage::from_pixel(cw * cols as u32, ch * rows as u32, image::Rgb([40, 40, 40]));
    for (i, m) in maps.iter().enumerate() {
        let norm = m.max_normalized();
        let (ox, oy) = ((i % cols) as u32 * cw + 1, (i / cols) as u32 * ch + 1);
        for y in 0..th * scale {
            for x in 0..tw * scale {
                let v = norm.get((x / scale) as usize, (y / scale) as usize);
                let g = (v * 255.0).round() as u8;
                img.put_pixel(ox + x, oy + y, image::Rgb([g, g, g]));
            }
        }
    }
    img
}

/// Probe image with the map blended in as a red-yellow heat overlay.
pub fn overlay(probe: &crate::tensor::Tensor<f32>, map: &SaliencyMap) -> Result<image::RgbImage> {
    let mut img = io::tensor_to_rgb(probe)?;
    if (img.width() as usize, img.height() as usize) != (map.width(), map.height()) {
        return Err(XfrError::ShapeMismatch {
            expected: vec![map.height(), map.width()],
            actual: vec![img.height() as usize, img.width() as usize],
        });
    }
    let norm = map.max_normalized();
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = norm.get(x as usize, y as usize);
        let heat = [255.0, 255.0 * v, 0.0];
        let a = 0.6 * v;
        for (c, h) in px.0.iter_mut().zip(heat) {
            *c = ((*c as f32) * (1.0 - a) + h * a).round() as u8;
        }
    }
    Ok(img)
}

//! Density-based input sampling: occlude the probe with sparse masks drawn
//! from an EBP-derived prior, weight each mask by the change in triplet
//! loss, and accumulate the weighted masks.

use std::collections::BTreeMap;

use rand::seq::index::sample_weighted;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{ebp, ebp_prior_triplet};
use crate::error::{Result, XfrError};
use crate::netcore::{triplet_loss, NetworkGraph};
use crate::rng::derive_rng;
use crate::saliency::{percentile_value, Normalization, SaliencyMap};
use crate::tensor::Tensor;

/// Default number of sampled masks.
pub const DEFAULT_SAMPLES: usize = 2000;
/// Default truncation percentile for the sampling prior.
pub const DEFAULT_PRIOR_PERCENTILE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fill {
    /// Gaussian-blurred copy of the image.
    Blur,
    /// Constant mid-gray.
    Gray,
}

/// Occlusion grid geometry. The grid is centred on the image, so with
/// 6 cells of 12 px over 64 px the outer cells hang 4 px off each edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rows: usize,
    pub cols: usize,
    /// Cells occluded per mask.
    pub elements: usize,
    /// Cell edge in pixels.
    pub cell_size: usize,
    pub fill: Fill,
    pub blur_sigma: f32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            rows: 6,
            cols: 6,
            elements: 2,
            cell_size: 12,
            fill: Fill::Blur,
            blur_sigma: 8.0,
        }
    }
}

impl MaskSpec {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(XfrError::InvalidArgument(format!("mask spec: {why}")));
        if self.rows == 0 || self.cols == 0 {
            return bad("grid must have at least one cell");
        }
        if self.elements == 0 || self.elements > self.cells() {
            return bad("elements per mask must be between 1 and the cell count");
        }
        if self.cell_size == 0 {
            return bad("cell size must be at least 1");
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma > 0.0) {
            return bad("blur sigma must be positive");
        }
        Ok(())
    }

    /// Pixel coordinate of the grid's top-left corner.
    fn origin(&self, width: usize, height: usize) -> (f64, f64) {
        let ox = (width as f64 - (self.cols * self.cell_size) as f64) / 2.0;
        let oy = (height as f64 - (self.rows * self.cell_size) as f64) / 2.0;
        (ox.floor(), oy.floor())
    }

    /// Cell holding pixel `(x, y)`, clamped to the grid.
    pub fn cell_of(&self, x: usize, y: usize, width: usize, height: usize) -> usize {
        let (ox, oy) = self.origin(width, height);
        let c = ((x as f64 - ox) / self.cell_size as f64).floor();
        let r = ((y as f64 - oy) / self.cell_size as f64).floor();
        let c = c.clamp(0.0, (self.cols - 1) as f64) as usize;
        let r = r.clamp(0.0, (self.rows - 1) as f64) as usize;
        r * self.cols + c
    }
}

/// Distribution over grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPrior {
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f64>,
}

impl SamplingPrior {
    /// Normalizes non-negative cell weights.
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(XfrError::LengthMismatch(rows * cols, weights.len()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(XfrError::InvalidArgument(
                "cell weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(XfrError::DegenerateSamplingPrior);
        }
        Ok(SamplingPrior {
            rows,
            cols,
            probs: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        SamplingPrior::new(rows, cols, vec![1.0; rows * cols]).expect("positive weights")
    }

    pub fn support(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }
}

/// Truncates `saliency` below its `percentile`, averages what is left over
/// the visible pixels of each cell, and normalizes.
pub fn ebp_sampling_prior(
    saliency: &SaliencyMap,
    spec: &MaskSpec,
    percentile: f64,
) -> Result<SamplingPrior> {
    spec.validate()?;
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(XfrError::InvalidArgument(format!(
            "percentile {percentile} outside (0, 100]"
        )));
    }
    let (w, h) = (saliency.width(), saliency.height());
    let cut = percentile_value(saliency.values(), percentile);
    let mut sums = vec![0.0f64; spec.cells()];
    let mut area = vec![0usize; spec.cells()];
    for y in 0..h {
        for x in 0..w {
            let cell = spec.cell_of(x, y, w, h);
            let v = saliency.get(x, y);
            if v >= cut {
                sums[cell] += v as f64;
            }
            area[cell] += 1;
        }
    }
    let means = sums
        .iter()
        .zip(&area)
        .map(|(&s, &a)| if a > 0 { s / a as f64 } else { 0.0 })
        .collect();
    SamplingPrior::new(spec.rows, spec.cols, means)
}

/// Per-pixel bilinear weights of each grid cell; a mask is the sum of the
/// bases of its cells, which is the bilinear upsampling of its binary grid.
#[derive(Debug, Clone)]
pub struct MaskBasis {
    cells: usize,
    taps: Vec<[(u16, f32); 4]>,
}

impl MaskBasis {
    pub fn new(spec: &MaskSpec, width: usize, height: usize) -> Result<Self> {
        spec.validate()?;
        let (ox, oy) = spec.origin(width, height);
        let cs = spec.cell_size as f64;
        let axis = |p: usize, o: f64, n: usize| {
            let g = ((p as f64 + 0.5 - o) / cs - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = g.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, g - i0 as f64)
        };
        let mut taps = Vec::with_capacity(width * height);
        for y in 0..height {
            let (r0, r1, ty) = axis(y, oy, spec.rows);
            for x in 0..width {
                let (c0, c1, tx) = axis(x, ox, spec.cols);
                let cell = |r: usize, c: usize| (r * spec.cols + c) as u16;
                taps.push([
                    (cell(r0, c0), ((1.0 - ty) * (1.0 - tx)) as f32),
                    (cell(r0, c1), ((1.0 - ty) * tx) as f32),
                    (cell(r1, c0), (ty * (1.0 - tx)) as f32),
                    (cell(r1, c1), (ty * tx) as f32),
                ]);
            }
        }
        Ok(MaskBasis {
            cells: spec.cells(),
            taps,
        })
    }

    /// Smooth pixel mask for a set of cells, values in `[0, 1]`.
    pub fn render(&self, cells: &[usize]) -> Vec<f32> {
        let mut on = vec![false; self.cells];
        for &c in cells {
            on[c] = true;
        }
        self.taps
            .iter()
            .map(|t| {
                t.iter()
                    .filter(|(c, _)| on[*c as usize])
                    .map(|(_, w)| w)
                    .sum::<f32>()
                    .min(1.0)
            })
            .collect()
    }
}

/// One sampled occlusion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    /// Occluded cells, ascending.
    pub cells: Vec<usize>,
    /// Pixel weights in `[0, 1]`, row-major.
    pub values: Vec<f32>,
}

/// Cell sets only; sample `i` uses its own stream derived from
/// `(seed, i)`.
pub fn sample_cell_sets(
    prior: &SamplingPrior,
    spec: &MaskSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if prior.probs.len() != spec.cells() {
        return Err(XfrError::LengthMismatch(spec.cells(), prior.probs.len()));
    }
    if prior.support() < spec.elements {
        return Err(XfrError::InvalidArgument(format!(
            "prior supports {} cells but masks need {}",
            prior.support(),
            spec.elements
        )));
    }
    (0..count)
        .map(|i| {
            let mut rng = derive_rng(seed, &[i as u64]);
            let mut cells = sample_weighted(&mut rng, prior.probs.len(), |c| prior.probs[c], spec.elements)
                .map_err(|e| XfrError::InvalidArgument(format!("cell sampling: {e}")))?
                .into_vec();
            cells.sort_unstable();
            Ok(cells)
        })
        .collect()
}

pub fn sample_masks(
    prior: &SamplingPrior,
    spec: &MaskSpec,
    count: usize,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Vec<OcclusionMask>> {
    let basis = MaskBasis::new(spec, width, height)?;
    Ok(sample_cell_sets(prior, spec, count, seed)?
        .into_iter()
        .map(|cells| OcclusionMask {
            values: basis.render(&cells),
            cells,
        })
        .collect())
}

/// Image the occluded pixels are blended toward.
pub fn fill_image(image: &Tensor<f32>, spec: &MaskSpec) -> Result<Tensor<f32>> {
    let (c, h, w) = image.chw().ok_or_else(|| XfrError::ShapeMismatch {
        expected: vec![3, 0, 0],
        actual: image.shape().to_vec(),
    })?;
    match spec.fill {
        Fill::Gray => Ok(Tensor::filled(image.shape(), 0.5)),
        Fill::Blur => {
            let hw = h * w;
            let d = image.data();
            let mut out = vec![0.0f32; c * hw];
            for ch in 0..c {
                let plane = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_raw(
                    w as u32,
                    h as u32,
                    d[ch * hw..(ch + 1) * hw].to_vec(),
                )
                .expect("sized plane");
                let blurred = image::imageops::blur(&plane, spec.blur_sigma);
                out[ch * hw..(ch + 1) * hw].copy_from_slice(blurred.as_raw());
            }
            Tensor::from_vec(image.shape(), out)
        }
    }
}

/// `image * (1 - mask) + fill * mask`, with the mask shared by all channels.
pub fn apply_mask(image: &Tensor<f32>, mask: &[f32], fill: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.shape() != fill.shape() {
        return Err(XfrError::ShapeMismatch {
            expected: image.shape().to_vec(),
            actual: fill.shape().to_vec(),
        });
    }
    let (_, h, w) = image.chw().ok_or_else(|| XfrError::ShapeMismatch {
        expected: vec![3, 0, 0],
        actual: image.shape().to_vec(),
    })?;
    if mask.len() != h * w {
        return Err(XfrError::LengthMismatch(h * w, mask.len()));
    }
    let data = image
        .data()
        .chunks(h * w)
        .zip(fill.data().chunks(h * w))
        .flat_map(|(img, fl)| {
            img.iter()
                .zip(fl)
                .zip(mask)
                .map(|((&x, &f), &m)| x * (1.0 - m) + f * m)
        })
        .collect();
    Tensor::from_vec(image.shape(), data)
}

/// Which loss change counts as evidence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightOrientation {
    /// `max(0, L(p) - L(p_masked))`.
    #[default]
    Verbatim,
    /// `max(0, L(p_masked) - L(p))`.
    Reversed,
}

fn oriented(base: f64, masked: f64, orientation: WeightOrientation) -> f64 {
    match orientation {
        WeightOrientation::Verbatim => (base - masked).max(0.0),
        WeightOrientation::Reversed => (masked - base).max(0.0),
    }
}

/// Rectified loss change caused by occluding the probe.
pub fn dise_weight(
    net: &NetworkGraph<f32>,
    p: &[f32],
    m: &[f32],
    n: &[f32],
    alpha: f32,
    masked_probe: &Tensor<f32>,
    orientation: WeightOrientation,
) -> Result<f64> {
    let base = triplet_loss(p, m, n, alpha)? as f64;
    let p_hat = net.embed(masked_probe)?;
    let masked = triplet_loss(p_hat.data(), m, n, alpha)? as f64;
    Ok(oriented(base, masked, orientation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiseParams {
    pub spec: MaskSpec,
    pub samples: usize,
    pub seed: u64,
    pub orientation: WeightOrientation,
    pub prior_percentile: f64,
}

impl Default for DiseParams {
    fn default() -> Self {
        DiseParams {
            spec: MaskSpec::default(),
            samples: DEFAULT_SAMPLES,
            seed: 0,
            orientation: WeightOrientation::default(),
            prior_percentile: DEFAULT_PRIOR_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiseResult {
    /// Max-normalized accumulated map.
    pub map: SaliencyMap,
    pub prior: SamplingPrior,
    /// Share of samples whose weight was zero.
    pub zero_weight_fraction: f64,
    /// Distinct cell sets that needed a forward pass.
    pub unique_masks: usize,
    pub warnings: Vec<String>,
}

/// `sum_i w_i M_i / sum_i w_i` in a fixed order; `None` when every weight
/// is zero.
pub fn accumulate(weighted: &[(&[f32], f64)], len: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0f64; len];
    let mut total = 0.0f64;
    for &(mask, wgt) in weighted {
        if wgt == 0.0 {
            continue;
        }
        total += wgt;
        for (a, &v) in acc.iter_mut().zip(mask) {
            *a += wgt * v as f64;
        }
    }
    (total > 0.0).then(|| acc.iter().map(|v| v / total).collect())
}

/// DISE with the prior built from the probe's own triplet EBP map.
pub fn dise(
    net: &NetworkGraph<f32>,
    probe: &Tensor<f32>,
    m: &[f32],
    n: &[f32],
    alpha: f32,
    params: &DiseParams,
) -> Result<DiseResult> {
    let (_, trace) = net.forward(probe)?;
    let prior = ebp_prior_triplet(m, n)?;
    let map = ebp(net, &trace, &prior, 0)?.map;
    let sampling = ebp_sampling_prior(&map, &params.spec, params.prior_percentile)?;
    dise_with_prior(net, probe, m, n, alpha, sampling, params)
}

/// DISE with a caller-supplied sampling prior.
pub fn dise_with_prior(
    net: &NetworkGraph<f32>,
    probe: &Tensor<f32>,
    m: &[f32],
    n: &[f32],
    alpha: f32,
    prior: SamplingPrior,
    params: &DiseParams,
) -> Result<DiseResult> {
    let spec = &params.spec;
    let (_, h, w) = probe.chw().ok_or_else(|| XfrError::ShapeMismatch {
        expected: vec![3, 0, 0],
        actual: probe.shape().to_vec(),
    })?;
    let sets = sample_cell_sets(&prior, spec, params.samples, params.seed)?;
    let basis = MaskBasis::new(spec, w, h)?;
    let fill = fill_image(probe, spec)?;
    let p = net.embed(probe)?;
    let base = triplet_loss(p.data(), m, n, alpha)? as f64;

    // The mask is a function of its cell set, so each distinct set is
    // evaluated once.
    let unique: Vec<&Vec<usize>> = sets
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let evaluated = unique
        .par_iter()
        .map(|cells| -> Result<f64> {
            let masked = apply_mask(probe, &basis.render(cells), &fill)?;
            let p_hat = net.embed(&masked)?;
            let loss = triplet_loss(p_hat.data(), m, n, alpha)? as f64;
            Ok(oriented(base, loss, params.orientation))
        })
        .collect::<Result<Vec<f64>>>()?;
    let weight_of: BTreeMap<&Vec<usize>, f64> = unique.iter().copied().zip(evaluated).collect();

    let rendered: BTreeMap<&Vec<usize>, Vec<f32>> =
        unique.iter().map(|&c| (c, basis.render(c))).collect();
    let weighted: Vec<(&[f32], f64)> = sets
        .iter()
        .map(|c| (rendered[c].as_slice(), weight_of[c]))
        .collect();
    let zeros = weighted.iter().filter(|(_, wgt)| *wgt == 0.0).count();
    let mut warnings = Vec::new();
    let values = match accumulate(&weighted, w * h) {
        Some(acc) => acc.iter().map(|&v| v as f32).collect(),
        None => {
            let msg = format!("all {} sample weights are zero; map left empty", sets.len());
            log::warn!("{msg}");
            warnings.push(msg);
            vec![0.0; w * h]
        }
    };
    let map = SaliencyMap::new(w, h, values, Normalization::RawProbability)?.max_normalized();
    Ok(DiseResult {
        map,
        prior,
        zero_weight_fraction: if sets.is_empty() {
            0.0
        } else {
            zeros as f64 / sets.len() as f64
        },
        unique_masks: unique.len(),
        warnings,
    })
}

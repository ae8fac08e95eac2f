//! Excitation backprop with triplet priors: plain, contrastive and truncated
//! contrastive maps, single-node rooted passes and the layerwise diagnostic.
//!
//! Mass moves top-down as marginal winner probabilities. A parent passes its
//! mass to children in proportion to `activation * max(weight, 0)`; biases do
//! not take part. When that normalizer is zero the parent's mass is dropped
//! and reported rather than redistributed.

use crate::error::{Result, XfrError};
use crate::netcore::{ops, ActivationTrace, Layer, NetworkGraph};
use crate::saliency::{bilinear, percentile_value, Normalization, SaliencyMap};
use crate::tensor::Real;

/// Starting distribution over the pre-normalization embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EbpPrior {
    weights: Vec<f64>,
    empty: bool,
}

impl EbpPrior {
    /// Normalizes non-negative `weights` to sum 1. All-zero weights give an
    /// empty prior.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(XfrError::InvalidArgument(
                "prior weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return Ok(EbpPrior {
                weights,
                empty: true,
            });
        }
        Ok(EbpPrior {
            weights: weights.iter().map(|w| w / total).collect(),
            empty: false,
        })
    }

    /// Unit mass on a single coordinate.
    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(XfrError::InvalidArgument(format!(
                "index {index} out of range for {len} coordinates"
            )));
        }
        let mut w = vec![0.0; len];
        w[index] = 1.0;
        EbpPrior::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }
}

/// Prior proportional to `max(0, m - n)`.
pub fn ebp_prior_triplet<T: Real>(m: &[T], n: &[T]) -> Result<EbpPrior> {
    if m.len() != n.len() {
        return Err(XfrError::LengthMismatch(m.len(), n.len()));
    }
    EbpPrior::new(
        m.iter()
            .zip(n)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).max(0.0))
            .collect(),
    )
}

/// Output of one EBP pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EbpResult {
    /// Max-normalized pixel map.
    pub map: SaliencyMap,
    /// Marginal winner probabilities summed over channels, at image size.
    pub raw: SaliencyMap,
    /// `raw` at full precision.
    pub raw_mass: Vec<f64>,
    /// Total mass that reached the stop layer.
    pub raw_sum: f64,
    /// Mass lost to zero normalizers on the way down.
    pub dropped_mass: f64,
}

/// Precomputed rectified weights for repeated passes over one trace.
pub struct Excitation<'a, T: Real> {
    net: &'a NetworkGraph<T>,
    trace: &'a ActivationTrace<T>,
    positive: Vec<Option<Vec<T>>>,
}

impl<'a, T: Real> Excitation<'a, T> {
    pub fn new(net: &'a NetworkGraph<T>, trace: &'a ActivationTrace<T>) -> Result<Self> {
        net.check_trace(trace)?;
        let positive = net
            .layers()
            .iter()
            .map(|l| {
                l.params()
                    .map(|(w, _)| w.data().iter().map(|&v| v.max(T::zero())).collect())
            })
            .collect();
        Ok(Excitation {
            net,
            trace,
            positive,
        })
    }

    /// Index of the layer whose output carries the pre-normalization
    /// embedding.
    pub fn top_layer(&self) -> usize {
        let n = self.net.len();
        match self.net.layers()[n - 1] {
            Layer::L2Normalize if n >= 2 => n - 2,
            _ => n - 1,
        }
    }

    /// Moves `mass`, laid out like the output of layer `from`, down to the
    /// input of layer `to`. Returns the child mass and the dropped mass.
    pub fn propagate(&self, from: usize, mass: Vec<T>, to: usize) -> Result<(Vec<T>, f64)> {
        if to > from || from >= self.net.len() {
            return Err(XfrError::InvalidArgument(format!(
                "cannot propagate from layer {from} down to layer {to}"
            )));
        }
        if mass.len() != self.trace.output(from).len() {
            return Err(XfrError::LengthMismatch(
                self.trace.output(from).len(),
                mass.len(),
            ));
        }
        let mut dropped = 0.0;
        let mut cur = mass;
        for idx in (to..=from).rev() {
            cur = self.step(idx, cur, &mut dropped);
        }
        Ok((cur, dropped))
    }

    fn step(&self, idx: usize, mass: Vec<T>, dropped: &mut f64) -> Vec<T> {
        let input = self.trace.layer_input(idx);
        let act: Vec<T> = input.data().iter().map(|&v| v.max(T::zero())).collect();
        let mut ratio = |z: Vec<T>, p: &[T]| -> Vec<T> {
            z.iter()
                .zip(p)
                .map(|(&z, &p)| {
                    if z > T::zero() {
                        p / z
                    } else {
                        *dropped += p.to_f64();
                        T::zero()
                    }
                })
                .collect()
        };
        match &self.net.layers()[idx] {
            Layer::Conv3x3 { weight, .. } => {
                let (c, h, w) = input.chw().expect("validated trace");
                let o = weight.shape()[0];
                let wp = self.positive[idx].as_ref().expect("conv has weights");
                let z = ops::conv3x3(&act, c, h, w, wp, None, o);
                let y = ratio(z, &mass);
                let back = ops::conv3x3_transpose(&y, o, h, w, wp, c);
                act.iter().zip(back).map(|(&a, b)| a * b).collect()
            }
            Layer::FullyConnected { weight, .. } => {
                let o = weight.shape()[0];
                let wp = self.positive[idx].as_ref().expect("fc has weights");
                let z = ops::fully_connected(&act, wp, None, o);
                let y = ratio(z, &mass);
                let back = ops::fully_connected_transpose(&y, wp, act.len());
                act.iter().zip(back).map(|(&a, b)| a * b).collect()
            }
            Layer::GlobalAvgPool => {
                let (c, h, w) = input.chw().expect("validated trace");
                let hw = h * w;
                let sums: Vec<T> = act.chunks(hw).map(|p| p.iter().copied().sum()).collect();
                let y = ratio(sums, &mass);
                let mut out = act;
                for (plane, &s) in out.chunks_mut(hw).zip(&y).take(c) {
                    plane.iter_mut().for_each(|v| *v = *v * s);
                }
                out
            }
            Layer::MaxPool2x2 => {
                let argmax = self.trace.records[idx]
                    .argmax
                    .as_ref()
                    .expect("validated trace");
                ops::unpool(&mass, argmax, input.len())
            }
            Layer::Relu | Layer::L2Normalize => mass,
        }
    }

    /// Sums mass at the input of `stop_layer` over channels and resizes it
    /// to the image.
    fn finish(&self, mass: &[T], stop_layer: usize, dropped: f64) -> Result<EbpResult> {
        let shape = self.trace.layer_input(stop_layer).shape();
        let (c, h, w) = match shape {
            &[c, h, w] => (c, h, w),
            _ => {
                return Err(XfrError::InvalidArgument(format!(
                    "stop layer {stop_layer} has non-spatial input {shape:?}"
                )))
            }
        };
        let hw = h * w;
        let mut plane = vec![0.0f64; hw];
        for ch in 0..c {
            for (acc, &v) in plane.iter_mut().zip(&mass[ch * hw..(ch + 1) * hw]) {
                *acc += v.to_f64();
            }
        }
        let raw_sum = plane.iter().sum();
        let (_, ih, iw) = self
            .trace
            .input
            .chw()
            .ok_or_else(|| XfrError::InvalidArgument("input is not an image".into()))?;
        let raw_mass: Vec<f64> = if (w, h) == (iw, ih) {
            plane.iter().map(|v| v.max(0.0)).collect()
        } else {
            bilinear(&plane, w, h, iw, ih).iter().map(|v| v.max(0.0)).collect()
        };
        let values = raw_mass.iter().map(|&v| v as f32).collect();
        let raw = SaliencyMap::new(iw, ih, values, Normalization::RawProbability)?;
        Ok(EbpResult {
            map: max_normalized_f64(iw, ih, &raw_mass)?,
            raw,
            raw_mass,
            raw_sum,
            dropped_mass: dropped,
        })
    }

    /// EBP from a prior over the pre-normalization embedding.
    pub fn from_prior(&self, prior: &EbpPrior, stop_layer: usize) -> Result<EbpResult> {
        if prior.is_empty() {
            return Err(XfrError::DegeneratePrior);
        }
        let top = self.top_layer();
        let mass = prior.weights().iter().map(|&v| T::from_f64(v)).collect();
        let (child, dropped) = self.propagate(top, mass, stop_layer)?;
        self.finish(&child, stop_layer, dropped)
    }

    /// EBP rooted at unit mass on one node of layer `layer`'s output.
    pub fn from_node(&self, layer: usize, index: usize, stop_layer: usize) -> Result<EbpResult> {
        let len = self
            .trace
            .records
            .get(layer)
            .map(|r| r.output.len())
            .ok_or_else(|| XfrError::InvalidArgument(format!("no layer {layer}")))?;
        if index >= len {
            return Err(XfrError::InvalidArgument(format!(
                "node {index} out of range for layer {layer} with {len} nodes"
            )));
        }
        let mut mass = vec![T::zero(); len];
        mass[index] = T::one();
        let (child, dropped) = self.propagate(layer, mass, stop_layer)?;
        self.finish(&child, stop_layer, dropped)
    }
}

/// Plain EBP from `prior` down to the input of `stop_layer` (0 for pixels).
pub fn ebp<T: Real>(
    net: &NetworkGraph<T>,
    trace: &ActivationTrace<T>,
    prior: &EbpPrior,
    stop_layer: usize,
) -> Result<EbpResult> {
    Excitation::new(net, trace)?.from_prior(prior, stop_layer)
}

/// EBP rooted at a single node, down to the image.
pub fn rooted_ebp<T: Real>(
    net: &NetworkGraph<T>,
    trace: &ActivationTrace<T>,
    layer: usize,
    index: usize,
) -> Result<EbpResult> {
    Excitation::new(net, trace)?.from_node(layer, index, 0)
}

/// Contrastive EBP and its two halves.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveEbp {
    /// Max-normalized `max(0, A - B)`.
    pub map: SaliencyMap,
    /// `A`: prior `max(0, m - n)`; `None` if that prior is empty.
    pub toward_mate: Option<EbpResult>,
    /// `B`: prior `max(0, n - m)`; `None` if that prior is empty.
    pub toward_nonmate: Option<EbpResult>,
}

pub fn contrastive_ebp<T: Real>(
    net: &NetworkGraph<T>,
    trace: &ActivationTrace<T>,
    m: &[T],
    n: &[T],
) -> Result<ContrastiveEbp> {
    let ex = Excitation::new(net, trace)?;
    let pa = ebp_prior_triplet(m, n)?;
    let pb = ebp_prior_triplet(n, m)?;
    if pa.is_empty() && pb.is_empty() {
        return Err(XfrError::DegeneratePrior);
    }
    let run = |p: &EbpPrior| -> Result<Option<EbpResult>> {
        if p.is_empty() {
            Ok(None)
        } else {
            ex.from_prior(p, 0).map(Some)
        }
    };
    let a = run(&pa)?;
    let b = run(&pb)?;
    let (_, h, w) = trace.input.chw().expect("validated trace");
    let map = match &a {
        None => SaliencyMap::zeros(w, h),
        Some(a) => {
            let diff: Vec<f64> = match &b {
                None => a.raw_mass.clone(),
                Some(b) => {
                    // Differences at rounding level are not contrast.
                    let scale = a.raw_mass.iter().chain(&b.raw_mass).cloned().fold(0.0, f64::max);
                    let floor = CONTRAST_FLOOR * scale;
                    a.raw_mass
                        .iter()
                        .zip(&b.raw_mass)
                        .map(|(&x, &y)| if x - y > floor { x - y } else { 0.0 })
                        .collect()
                }
            };
            max_normalized_f64(w, h, &diff)?
        }
    };
    Ok(ContrastiveEbp {
        map,
        toward_mate: a,
        toward_nonmate: b,
    })
}

/// Relative size below which `A - B` counts as zero.
const CONTRAST_FLOOR: f64 = 1e-12;

/// Max-normalizes in full precision before rounding to the map type.
fn max_normalized_f64(w: usize, h: usize, values: &[f64]) -> Result<SaliencyMap> {
    let peak = values.iter().cloned().fold(0.0, f64::max);
    let scaled = values
        .iter()
        .map(|&v| if peak > 0.0 { (v / peak) as f32 } else { 0.0 })
        .collect();
    SaliencyMap::new(w, h, scaled, Normalization::MaxNormalized)
}

/// Default percentile for [`truncated_contrastive_ebp`].
pub const DEFAULT_TRUNCATION_PERCENTILE: f64 = 50.0;

/// Contrastive EBP kept only where the plain EBP map reaches its `k`-th
/// percentile (ties at the percentile are kept).
pub fn truncated_contrastive_ebp<T: Real>(
    net: &NetworkGraph<T>,
    trace: &ActivationTrace<T>,
    m: &[T],
    n: &[T],
    k: f64,
) -> Result<SaliencyMap> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(XfrError::InvalidArgument(format!(
            "percentile {k} outside (0, 100]"
        )));
    }
    let c = contrastive_ebp(net, trace, m, n)?;
    let Some(a) = &c.toward_mate else {
        return Ok(c.map);
    };
    let cut = percentile_value(a.raw.values(), k);
    let values = c
        .map
        .values()
        .iter()
        .zip(a.raw.values())
        .map(|(&v, &e)| if e >= cut { v } else { 0.0 })
        .collect();
    Ok(SaliencyMap::new(c.map.width(), c.map.height(), values, Normalization::RawProbability)?
        .max_normalized())
}

/// One entry of the layerwise diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseMap {
    pub layer: usize,
    /// Flat index of the root node, `None` when the layer is all zero.
    pub root: Option<usize>,
    pub map: SaliencyMap,
}

impl LayerwiseMap {
    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }
}

/// For each ReLU layer, EBP rooted at that layer's most active node.
pub fn layerwise_ebp<T: Real>(
    net: &NetworkGraph<T>,
    trace: &ActivationTrace<T>,
) -> Result<Vec<LayerwiseMap>> {
    let ex = Excitation::new(net, trace)?;
    let (_, h, w) = trace
        .input
        .chw()
        .ok_or_else(|| XfrError::InvalidArgument("input is not an image".into()))?;
    net.relu_layers()
        .into_iter()
        .map(|layer| {
            let out = trace.output(layer).data();
            let mut best: Option<(usize, T)> = None;
            for (i, &v) in out.iter().enumerate() {
                if v > T::zero() && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            match best {
                None => {
                    log::warn!("layer {layer} has no active node; layerwise map left empty");
                    Ok(LayerwiseMap {
                        layer,
                        root: None,
                        map: SaliencyMap::zeros(w, h),
                    })
                }
                Some((index, _)) => Ok(LayerwiseMap {
                    layer,
                    root: Some(index),
                    map: ex.from_node(layer, index, 0)?.map,
                }),
            }
        })
        .collect()
}

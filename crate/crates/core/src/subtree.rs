//! Subtree EBP: rank post-ReLU nodes by the triplet-loss gradient, root an
//! EBP pass at each of the top-k nodes and blend the per-node maps with the
//! node scores as convex weights.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::attribution::Excitation;
use crate::error::{Result, XfrError};
use crate::netcore::{triplet_loss, triplet_loss_grad, ActivationTrace, NetworkGraph};
use crate::saliency::{Normalization, SaliencyMap};
use crate::tensor::{Real, Tensor};

/// Default number of nodes combined.
pub const DEFAULT_K: usize = 27;

/// Which sign of `dL/dx` counts as explanatory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientOrientation {
    /// `max(0, -dL/dx)`: nodes whose growth lowers the loss.
    #[default]
    Descent,
    /// `max(0, dL/dx)`.
    Verbatim,
}

/// One post-ReLU scalar with its rectified gradient score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredNode {
    pub layer: usize,
    /// Flat index into the layer output.
    pub index: usize,
    pub score: f64,
}

impl ScoredNode {
    /// `(channel, row, column)` for a `[c, h, w]` layer output.
    pub fn position(&self, shape: &[usize]) -> Option<(usize, usize, usize)> {
        match *shape {
            [_, h, w] => Some((self.index / (h * w), (self.index / w) % h, self.index % w)),
            _ => None,
        }
    }
}

/// Scores every post-ReLU node of the probe trace. Only positive scores
/// are returned, in (layer, index) order.
pub fn node_gradients<T: Real>(
    net: &NetworkGraph<T>,
    trace: &ActivationTrace<T>,
    m: &[T],
    n: &[T],
    alpha: T,
    orientation: GradientOrientation,
) -> Result<Vec<ScoredNode>> {
    let p = trace.embedding().data();
    if triplet_loss(p, m, n, alpha)? <= T::zero() {
        return Err(XfrError::InactiveHinge);
    }
    let g = triplet_loss_grad(p, m, n, alpha)?;
    let grads = net.backward(trace, &Tensor::from_vec(&[g.len()], g)?)?;
    let mut out = Vec::new();
    for layer in net.relu_layers() {
        for (index, &d) in grads.layers[layer].data().iter().enumerate() {
            let d = d.to_f64();
            let score = match orientation {
                GradientOrientation::Descent => -d,
                GradientOrientation::Verbatim => d,
            };
            if score > 0.0 {
                out.push(ScoredNode {
                    layer,
                    index,
                    score,
                });
            }
        }
    }
    Ok(out)
}

fn rank(a: &ScoredNode, b: &ScoredNode) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.layer.cmp(&b.layer))
        .then(a.index.cmp(&b.index))
}

/// The `k` highest scores, descending; ties go to the lower (layer, index).
pub fn top_k_nodes(scores: &[ScoredNode], k: usize) -> Result<Vec<ScoredNode>> {
    if scores.is_empty() {
        return Err(XfrError::NoScoredNodes);
    }
    if k == 0 {
        return Err(XfrError::InvalidArgument("k must be at least 1".into()));
    }
    let mut sorted = scores.to_vec();
    if k < sorted.len() {
        sorted.select_nth_unstable_by(k - 1, rank);
        sorted.truncate(k);
    }
    sorted.sort_by(rank);
    Ok(sorted)
}

/// Subtree EBP output with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtreeResult {
    /// Max-normalized combined map.
    pub map: SaliencyMap,
    /// Selected nodes, best first.
    pub nodes: Vec<ScoredNode>,
    /// Convex weights, aligned with `nodes`; they sum to 1.
    pub weights: Vec<f64>,
    /// Max-normalized per-node maps, aligned with `nodes`.
    pub node_maps: Vec<SaliencyMap>,
}

/// Convex combination `sum_i w_i S_i / sum_j w_j` of max-normalized maps.
pub fn combine(maps: &[SaliencyMap], scores: &[f64]) -> Result<(SaliencyMap, Vec<f64>)> {
    let first = maps
        .first()
        .ok_or_else(|| XfrError::InvalidArgument("nothing to combine".into()))?;
    if maps.len() != scores.len() {
        return Err(XfrError::LengthMismatch(maps.len(), scores.len()));
    }
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) || scores.iter().any(|&s| s < 0.0) {
        return Err(XfrError::InvalidArgument(
            "combination weights must be non-negative with a positive sum".into(),
        ));
    }
    let weights: Vec<f64> = scores.iter().map(|s| s / total).collect();
    let mut acc = vec![0.0f64; first.values().len()];
    for (m, &w) in maps.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += w * v as f64;
        }
    }
    let values = acc.into_iter().map(|v| v as f32).collect();
    let map = SaliencyMap::new(first.width(), first.height(), values, Normalization::RawProbability)?;
    Ok((map, weights))
}

pub fn subtree_ebp<T: Real>(
    net: &NetworkGraph<T>,
    trace: &ActivationTrace<T>,
    m: &[T],
    n: &[T],
    alpha: T,
    k: usize,
    orientation: GradientOrientation,
) -> Result<SubtreeResult> {
    let scored = node_gradients(net, trace, m, n, alpha, orientation)?;
    let nodes = top_k_nodes(&scored, k)?;
    let ex = Excitation::new(net, trace)?;
    let node_maps = nodes
        .par_iter()
        .map(|node| ex.from_node(node.layer, node.index, 0).map(|r| r.map))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = nodes.iter().map(|n| n.score).collect();
    let (combined, weights) = combine(&node_maps, &scores)?;
    Ok(SubtreeResult {
        map: combined.max_normalized(),
        nodes,
        weights,
        node_maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(layer: usize, index: usize, score: f64) -> ScoredNode {
        ScoredNode {
            layer,
            index,
            score,
        }
    }

    #[test]
    fn ties_follow_node_order() {
        let s = [node(4, 2, 1.0), node(1, 9, 1.0), node(1, 3, 1.0), node(7, 0, 2.0)];
        let top = top_k_nodes(&s, 3).unwrap();
        assert_eq!(top, vec![node(7, 0, 2.0), node(1, 3, 1.0), node(1, 9, 1.0)]);
        assert_eq!(top_k_nodes(&s, 10).unwrap().len(), 4);
        assert!(top_k_nodes(&[], 3).is_err());
        assert!(top_k_nodes(&s, 0).is_err());
    }

    #[test]
    fn equal_weights_average_disjoint_maps() {
        let a = SaliencyMap::new(2, 1, vec![1.0, 0.0], Normalization::MaxNormalized).unwrap();
        let b = SaliencyMap::new(2, 1, vec![0.0, 1.0], Normalization::MaxNormalized).unwrap();
        let (m, w) = combine(&[a, b], &[3.0, 3.0]).unwrap();
        assert_eq!(m.values(), &[0.5, 0.5]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn position_decodes_chw() {
        assert_eq!(node(0, 2 * 12 + 4 + 3, 1.0).position(&[5, 3, 4]), Some((2, 1, 3)));
        assert_eq!(node(0, 13, 1.0).position(&[5, 3, 4]), Some((1, 0, 1)));
        assert_eq!(node(0, 0, 1.0).position(&[8]), None);
    }
}

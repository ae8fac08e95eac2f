mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use xfr_core::attribution::Excitation;
use xfr_core::netcore::triplet_loss;
use xfr_core::subtree::{
    combine, node_gradients, subtree_ebp, top_k_nodes, GradientOrientation, ScoredNode,
};
use xfr_core::XfrError;

fn unit(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / s).collect()
}

struct Fixture {
    net: xfr_core::NetworkGraph<f64>,
    trace: xfr_core::ActivationTrace<f64>,
    m: Vec<f64>,
    n: Vec<f64>,
}

fn fixture(seed: u64, variant: usize) -> Fixture {
    let mut rng = support::rng(seed);
    let (net, [c, h, w]) = support::small_net(&mut rng, variant);
    let (e, trace) = net.forward(&support::image(&mut rng, c, h, w)).unwrap();
    let m = unit(&mut rng, e.len());
    let n = unit(&mut rng, e.len());
    Fixture { net, trace, m, n }
}

const ALPHA: f64 = 4.0;

#[test]
fn scores_match_finite_differences() {
    for seed in 0..4 {
        let f = fixture(600 + seed, seed as usize);
        let nodes = node_gradients(&f.net, &f.trace, &f.m, &f.n, ALPHA, GradientOrientation::Descent).unwrap();
        let got: BTreeMap<(usize, usize), f64> = nodes.iter().map(|s| ((s.layer, s.index), s.score)).collect();
        let loss = |e: &[f64]| triplet_loss(e, &f.m, &f.n, ALPHA).unwrap();
        let mut checked = 0;
        for layer in f.net.relu_layers() {
            for index in 0..f.trace.output(layer).len() {
                let Some(fd) = support::fd_node_gradient(&f.net, &f.trace, layer, index, &loss, 1e-4) else {
                    continue;
                };
                let expect = (-fd).max(0.0);
                let actual = got.get(&(layer, index)).copied().unwrap_or(0.0);
                assert!(
                    (expect - actual).abs() <= 1e-6 + 1e-4 * expect.abs(),
                    "seed {seed} node ({layer}, {index}): fd {expect} vs {actual}"
                );
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn orientation_flip_negates_gradients() {
    let f = fixture(7, 0);
    let descent = node_gradients(&f.net, &f.trace, &f.m, &f.n, ALPHA, GradientOrientation::Descent).unwrap();
    let verbatim = node_gradients(&f.net, &f.trace, &f.m, &f.n, ALPHA, GradientOrientation::Verbatim).unwrap();
    let g = f
        .net
        .backward(
            &f.trace,
            &xfr_core::Tensor::from_vec(
                &[f.m.len()],
                f.m.iter().zip(&f.n).map(|(a, b)| 2.0 * (b - a)).collect(),
            )
            .unwrap(),
        )
        .unwrap();
    let mut expect_v = Vec::new();
    let mut expect_d = Vec::new();
    for layer in f.net.relu_layers() {
        for (index, &d) in g.layers[layer].data().iter().enumerate() {
            if d > 0.0 {
                expect_v.push(ScoredNode { layer, index, score: d });
            }
            if -d > 0.0 {
                expect_d.push(ScoredNode { layer, index, score: -d });
            }
        }
    }
    assert_eq!(verbatim, expect_v);
    assert_eq!(descent, expect_d);
}

#[test]
fn equal_embeddings_give_no_nodes_and_satisfied_triplets_error() {
    let f = fixture(8, 0);
    let nodes = node_gradients(&f.net, &f.trace, &f.m, &f.m, 0.5, GradientOrientation::Descent).unwrap();
    assert!(nodes.is_empty());
    let p = f.trace.embedding().data().to_vec();
    let far: Vec<f64> = p.iter().map(|v| -v).collect();
    assert!(matches!(
        node_gradients(&f.net, &f.trace, &p, &far, 0.0, GradientOrientation::Descent),
        Err(XfrError::InactiveHinge)
    ));
}

#[test]
fn single_node_equals_rooted_ebp() {
    for seed in 0..3 {
        let f = fixture(20 + seed, seed as usize);
        let r = subtree_ebp(&f.net, &f.trace, &f.m, &f.n, ALPHA, 1, GradientOrientation::Descent).unwrap();
        let node = r.nodes[0];
        let rooted = Excitation::new(&f.net, &f.trace).unwrap().from_node(node.layer, node.index, 0).unwrap();
        assert_eq!(r.map, rooted.map);
        assert_eq!(r.weights, vec![1.0]);
    }
}

#[test]
fn brute_force_top_27() {
    let f = fixture(31, 2);
    let nodes = node_gradients(&f.net, &f.trace, &f.m, &f.n, ALPHA, GradientOrientation::Descent).unwrap();
    let mut sorted = nodes.clone();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then((a.layer, a.index).cmp(&(b.layer, b.index)))
    });
    sorted.truncate(27);
    assert_eq!(top_k_nodes(&nodes, 27).unwrap(), sorted);
}

#[test]
fn weights_are_convex_and_selection_is_a_prefix() {
    let f = fixture(41, 0);
    let mut previous: Vec<ScoredNode> = Vec::new();
    for k in 1..=40 {
        let r = subtree_ebp(&f.net, &f.trace, &f.m, &f.n, ALPHA, k, GradientOrientation::Descent).unwrap();
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(&r.nodes[..previous.len()], &previous[..]);
        previous = r.nodes;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_is_scale_equivariant(
        scores in prop::collection::vec(0.001f64..10.0, 1..60),
        c in 0.01f64..100.0,
        k in 1usize..30,
    ) {
        let nodes: Vec<ScoredNode> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredNode { layer: i % 3, index: i, score: s })
            .collect();
        let scaled: Vec<ScoredNode> = nodes.iter().map(|n| ScoredNode { score: n.score * c, ..*n }).collect();
        let a = top_k_nodes(&nodes, k).unwrap();
        let b = top_k_nodes(&scaled, k).unwrap();
        let ids = |v: &[ScoredNode]| v.iter().map(|n| (n.layer, n.index)).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&b));

        let maps: Vec<_> = a
            .iter()
            .map(|n| {
                let v = (0..16).map(|i| ((i * 7 + n.index) % 5) as f32 / 4.0).collect();
                xfr_core::SaliencyMap::new(4, 4, v, xfr_core::saliency::Normalization::MaxNormalized).unwrap()
            })
            .collect();
        let sa: Vec<f64> = a.iter().map(|n| n.score).collect();
        let sb: Vec<f64> = b.iter().map(|n| n.score).collect();
        let (ma, wa) = combine(&maps, &sa).unwrap();
        let (mb, _) = combine(&maps, &sb).unwrap();
        prop_assert!((wa.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (x, y) in ma.values().iter().zip(mb.values()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
        // the combination stays inside the hull of the inputs
        for (i, v) in ma.values().iter().enumerate() {
            let lo = maps.iter().map(|m| m.values()[i]).fold(f32::INFINITY, f32::min);
            let hi = maps.iter().map(|m| m.values()[i]).fold(0.0, f32::max);
            prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
        }
    }
}

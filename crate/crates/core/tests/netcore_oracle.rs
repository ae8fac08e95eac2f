mod support;

use proptest::prelude::*;
use rand::Rng;

use xfr_core::netcore::{reference_architecture, IMAGE_SIZE};
use xfr_core::Tensor;

#[test]
fn gradients_match_central_differences() {
    for seed in 0..5u64 {
        let mut rng = support::rng(100 + seed);
        let (net, [c, h, w]) = support::small_net(&mut rng, seed as usize);
        let img = support::image(&mut rng, c, h, w);
        let dim = net.embed(&img).unwrap().len();
        let coord = rng.random_range(0..dim);
        let r = support::finite_difference_check(&net, &img, coord, 1e-3);
        assert!(
            r.max_rel_err < 1e-4,
            "net {seed}: max relative error {} over {} nodes",
            r.max_rel_err,
            r.checked
        );
        // Skips are dead relu outputs tied inside a pooling window.
        assert!(r.skipped * 3 < r.checked, "net {seed}: {} of {} nodes skipped", r.skipped, r.checked);
    }
}

#[test]
fn parameter_gradients_match_central_differences() {
    use xfr_core::netcore::{Layer, NetworkGraph, ParamGrads};
    for variant in 0..5 {
        let mut rng = support::rng(300 + variant as u64);
        let (net, [c, h, w]) = support::small_net(&mut rng, variant);
        let img = support::image(&mut rng, c, h, w);
        let (e, trace) = net.forward(&img).unwrap();
        let proj: Vec<f64> = (0..e.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let loss = |n: &NetworkGraph<f64>| {
            let e = n.embed(&img).unwrap();
            e.data().iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grads = ParamGrads::zeros_like(&net);
        net.backward_with_params(&trace, &Tensor::from_vec(e.shape(), proj.clone()).unwrap(), &mut grads)
            .unwrap();
        let step = 1e-5;
        let mut worst = 0.0f64;
        for (l, g) in grads.layers.iter().enumerate() {
            let Some((gw, gb)) = g else { continue };
            for (which, gt) in [(0, gw), (1, gb)] {
                for i in 0..gt.len() {
                    let nudged = |d: f64| {
                        let mut layers = net.layers().to_vec();
                        match &mut layers[l] {
                            Layer::Conv3x3 { weight, bias } | Layer::FullyConnected { weight, bias } => {
                                let t = if which == 0 { weight } else { bias };
                                t.data_mut()[i] += d;
                            }
                            _ => unreachable!(),
                        }
                        loss(&NetworkGraph::new(layers).unwrap())
                    };
                    let fd = (nudged(step) - nudged(-step)) / (2.0 * step);
                    let a = gt.data()[i];
                    worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                }
            }
        }
        assert!(worst < 1e-3, "variant {variant}: parameter gradient error {worst}");
    }
}

#[test]
fn zero_loss_gradient_gives_zero_trace() {
    let mut rng = support::rng(3);
    let (net, [c, h, w]) = support::small_net(&mut rng, 0);
    let (e, trace) = net.forward(&support::image(&mut rng, c, h, w)).unwrap();
    let g = net.backward(&trace, &Tensor::zeros(e.shape())).unwrap();
    assert!(g.input.data().iter().all(|&v| v == 0.0));
    assert!(g.layers.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    let again = net.backward(&trace, &Tensor::zeros(e.shape())).unwrap();
    assert_eq!(g, again);
}

#[test]
fn engine_matches_direct_loops() {
    for variant in 0..5 {
        let mut rng = support::rng(200 + variant as u64);
        let (net, [c, h, w]) = support::small_net(&mut rng, variant);
        let img = support::image(&mut rng, c, h, w);
        let (_, trace) = net.forward(&img).unwrap();
        let direct = support::direct_activations(&net, &img);
        for (l, rec) in trace.records.iter().enumerate() {
            for (a, b) in rec.output.data().iter().zip(&direct[l + 1]) {
                assert!((a - b).abs() < 1e-12, "variant {variant} layer {l}");
            }
        }
    }
}

#[test]
fn all_zero_image_embeds_to_unit_vector() {
    let net = reference_architecture(&mut support::rng(1));
    let e = net.embed(&Tensor::zeros(&[3, IMAGE_SIZE, IMAGE_SIZE])).unwrap();
    assert!(e.all_finite());
    assert!((e.l2_norm() - 1.0).abs() < 1e-5);
}

#[test]
fn trace_from_other_net_is_rejected() {
    let mut rng = support::rng(4);
    let (a, [c, h, w]) = support::small_net(&mut rng, 0);
    let (b, _) = support::small_net(&mut rng, 3);
    let (e, trace) = a.forward(&support::image(&mut rng, c, h, w)).unwrap();
    assert!(b.backward(&trace, &Tensor::zeros(e.shape())).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reference_embeddings_are_unit_and_deterministic(seed in any::<u64>(), level in 0.0f32..1.0) {
        let net = reference_architecture(&mut support::rng(11));
        let mut rng = support::rng(seed);
        let n = 3 * IMAGE_SIZE * IMAGE_SIZE;
        let data = (0..n).map(|_| (rng.random::<f32>() * level).min(1.0)).collect();
        let img = Tensor::from_vec(&[3, IMAGE_SIZE, IMAGE_SIZE], data).unwrap();
        let (e1, _) = net.forward(&img).unwrap();
        let (e2, _) = net.forward(&img).unwrap();
        prop_assert!(e1.all_finite());
        prop_assert!((e1.l2_norm() - 1.0).abs() < 1e-5);
        prop_assert_eq!(e1.data(), e2.data());
    }
}

mod support;

use proptest::prelude::*;
use rand::Rng;

use xfr_core::dise::{
    accumulate, apply_mask, dise, dise_weight, dise_with_prior, ebp_sampling_prior, fill_image,
    sample_cell_sets, sample_masks, DiseParams, Fill, MaskSpec, SamplingPrior, WeightOrientation,
};
use xfr_core::netcore::{reference_architecture, IMAGE_SIZE};
use xfr_core::saliency::{percentile_value, Normalization};
use xfr_core::synth::{render_face, sample_identity, Nuisance};
use xfr_core::{NetworkGraph, SaliencyMap, Tensor};

const S: usize = IMAGE_SIZE;

struct Fixture {
    net: NetworkGraph<f32>,
    probe: Tensor<f32>,
    m: Vec<f32>,
    n: Vec<f32>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = support::rng(seed);
    let net = reference_architecture(&mut rng);
    let mut face = || render_face(&sample_identity(&mut rng), &Nuisance::none()).image;
    let probe = face();
    let m = net.embed(&face()).unwrap().into_data();
    let n = net.embed(&face()).unwrap().into_data();
    Fixture { net, probe, m, n }
}

fn map_from(values: Vec<f32>) -> SaliencyMap {
    SaliencyMap::new(S, S, values, Normalization::RawProbability).unwrap()
}

#[test]
fn uniform_saliency_gives_uniform_prior() {
    let p = ebp_sampling_prior(&map_from(vec![0.3; S * S]), &MaskSpec::default(), 50.0).unwrap();
    assert!(p.probs.iter().all(|&v| (v - 1.0 / 36.0).abs() < 1e-12));
}

#[test]
fn single_cell_saliency_gives_point_prior() {
    let spec = MaskSpec::default();
    let mut v = vec![0.0; S * S];
    // cell 14 spans pixels [20, 32) in both axes
    for y in 22..30 {
        for x in 21..31 {
            v[y * S + x] = 1.0;
        }
    }
    let p = ebp_sampling_prior(&map_from(v), &spec, 50.0).unwrap();
    assert_eq!(p.probs[14], 1.0);
    assert_eq!(p.probs.iter().filter(|&&x| x > 0.0).count(), 1);
}

#[test]
fn prior_matches_brute_force_cell_means() {
    let mut rng = support::rng(5);
    let values: Vec<f32> = (0..S * S).map(|_| rng.random::<f32>().powi(3)).collect();
    let spec = MaskSpec::default();
    let p = ebp_sampling_prior(&map_from(values.clone()), &spec, 50.0).unwrap();
    let cut = percentile_value(&values, 50.0);
    let mut expect = vec![0.0f64; 36];
    for r in 0..6 {
        for c in 0..6 {
            // centred grid: cells start 4 px before the image edge
            let ys = (12 * r as i64 - 4).max(0) as usize..((12 * r as i64 + 8).min(S as i64)) as usize;
            let xs = (12 * c as i64 - 4).max(0) as usize..((12 * c as i64 + 8).min(S as i64)) as usize;
            let area = (ys.len() * xs.len()) as f64;
            let mut sum = 0.0;
            for y in ys.clone() {
                for x in xs.clone() {
                    let v = values[y * S + x];
                    if v >= cut {
                        sum += v as f64;
                    }
                }
            }
            expect[r * 6 + c] = sum / area;
        }
    }
    let total: f64 = expect.iter().sum();
    for (a, e) in p.probs.iter().zip(&expect) {
        assert!((a - e / total).abs() < 1e-12);
    }
    assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn uniform_prior_selects_cells_uniformly() {
    let spec = MaskSpec::default();
    let count = 10_000;
    let sets = sample_cell_sets(&SamplingPrior::uniform(6, 6), &spec, count, 17).unwrap();
    let mut freq = [0usize; 36];
    for s in &sets {
        assert_eq!(s.len(), 2);
        assert_ne!(s[0], s[1]);
        for &c in s {
            freq[c] += 1;
        }
    }
    // each cell is in a mask with probability 2/36
    let p = 2.0 / 36.0;
    let se = (count as f64 * p * (1.0 - p)).sqrt();
    for (c, &f) in freq.iter().enumerate() {
        let z = (f as f64 - count as f64 * p) / se;
        assert!(z.abs() < 3.0, "cell {c}: {f} selections, z = {z}");
    }
}

#[test]
fn masks_are_seeded_and_bounded() {
    let spec = MaskSpec::default();
    let prior = SamplingPrior::uniform(6, 6);
    let a = sample_masks(&prior, &spec, 50, 3, S, S).unwrap();
    let b = sample_masks(&prior, &spec, 50, 3, S, S).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|m| m.values.iter().all(|&v| (0.0..=1.0).contains(&v))));
    // prefixes agree: sample i depends only on (seed, i)
    let c = sample_masks(&prior, &spec, 20, 3, S, S).unwrap();
    assert_eq!(&a[..20], &c[..]);
}

#[test]
fn apply_mask_definition() {
    let f = fixture(1);
    let spec = MaskSpec { fill: Fill::Gray, ..MaskSpec::default() };
    let fill = fill_image(&f.probe, &spec).unwrap();
    assert_eq!(apply_mask(&f.probe, &vec![0.0; S * S], &fill).unwrap(), f.probe);
    let full = apply_mask(&f.probe, &vec![1.0; S * S], &fill).unwrap();
    assert!(full.data().iter().all(|&v| v == 0.5));
    let half: Vec<f32> = (0..S * S).map(|i| if i % 2 == 0 { 0.5 } else { 0.25 }).collect();
    let blur = fill_image(&f.probe, &MaskSpec::default()).unwrap();
    let out = apply_mask(&f.probe, &half, &blur).unwrap();
    for (i, &v) in out.data().iter().enumerate() {
        let m = half[i % (S * S)];
        let expect = f.probe.data()[i] * (1.0 - m) + blur.data()[i] * m;
        assert!((v - expect).abs() < 1e-6);
    }
    assert!(apply_mask(&f.probe, &[0.0; 10], &fill).is_err());
}

#[test]
fn unoccluded_probe_has_zero_weight() {
    let f = fixture(2);
    let p = f.net.embed(&f.probe).unwrap();
    for o in [WeightOrientation::Verbatim, WeightOrientation::Reversed] {
        let w = dise_weight(&f.net, p.data(), &f.m, &f.n, 1.0, &f.probe, o).unwrap();
        assert_eq!(w, 0.0);
    }
}

#[test]
fn accumulation_examples() {
    let a = vec![0.2f32, 0.8, 0.0];
    let b = vec![1.0f32, 0.0, 0.5];
    assert_eq!(accumulate(&[(&a, 2.0)], 3).unwrap(), vec![0.2f32 as f64, 0.8f32 as f64, 0.0]);
    assert!(accumulate(&[(&a, 0.0), (&b, 0.0)], 3).is_none());
    let fwd = accumulate(&[(&a, 0.3), (&b, 0.9)], 3).unwrap();
    let rev = accumulate(&[(&b, 0.9), (&a, 0.3)], 3).unwrap();
    for (x, y) in fwd.iter().zip(&rev) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn all_zero_weights_warn_and_give_empty_map() {
    let f = fixture(3);
    let p = f.net.embed(&f.probe).unwrap().into_data();
    // probe already at the mate and far from the nonmate: hinge inactive
    let n: Vec<f32> = p.iter().map(|v| -v).collect();
    let params = DiseParams { samples: 40, ..DiseParams::default() };
    let r = dise_with_prior(&f.net, &f.probe, &p, &n, 0.1, SamplingPrior::uniform(6, 6), &params).unwrap();
    assert!(r.map.is_zero());
    assert_eq!(r.warnings.len(), 1);
    assert_eq!(r.zero_weight_fraction, 1.0);
}

#[test]
fn dise_is_deterministic_and_confined_to_sampled_support() {
    let f = fixture(4);
    let params = DiseParams {
        samples: 200,
        seed: 11,
        orientation: WeightOrientation::Reversed,
        ..DiseParams::default()
    };
    let a = dise(&f.net, &f.probe, &f.m, &f.n, 1.0, &params).unwrap();
    let b = dise(&f.net, &f.probe, &f.m, &f.n, 1.0, &params).unwrap();
    assert_eq!(a, b);
    assert!(a.unique_masks <= 630);

    let mut w = vec![0.0; 36];
    w[7] = 1.0;
    w[8] = 1.0;
    let prior = SamplingPrior::new(6, 6, w).unwrap();
    let r = dise_with_prior(&f.net, &f.probe, &f.m, &f.n, 1.0, prior.clone(), &params).unwrap();
    let support = sample_masks(&prior, &params.spec, 1, 0, S, S).unwrap().remove(0).values;
    for (v, s) in r.map.values().iter().zip(&support) {
        if *s == 0.0 {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn more_samples_move_the_map_less() {
    let f = fixture(6);
    let run = |samples| {
        let params = DiseParams {
            samples,
            seed: 5,
            orientation: WeightOrientation::Reversed,
            ..DiseParams::default()
        };
        let r = dise(&f.net, &f.probe, &f.m, &f.n, 1.0, &params).unwrap();
        r.map.values().to_vec()
    };
    let l1 = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
    let (m1, m2, m3) = (run(100), run(400), run(1600));
    assert!(l1(&m2, &m3) < l1(&m1, &m2), "{} vs {}", l1(&m2, &m3), l1(&m1, &m2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn accumulation_is_order_invariant(
        weights in prop::collection::vec(0.0f64..5.0, 1..20),
        seed in any::<u64>(),
    ) {
        let mut rng = support::rng(seed);
        let masks: Vec<Vec<f32>> = weights.iter().map(|_| (0..16).map(|_| rng.random::<f32>()).collect()).collect();
        let items: Vec<(&[f32], f64)> = masks.iter().map(|m| m.as_slice()).zip(weights.iter().copied()).collect();
        let mut shuffled = items.clone();
        shuffled.reverse();
        shuffled.rotate_left(seed as usize % items.len());
        match (accumulate(&items, 16), accumulate(&shuffled, 16)) {
            (Some(a), Some(b)) => {
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
                prop_assert!(a.iter().all(|&v| v >= 0.0));
            }
            (None, None) => prop_assert!(weights.iter().all(|&w| w == 0.0)),
            _ => prop_assert!(false),
        }
    }

    #[test]
    fn sampling_prior_is_a_distribution(seed in any::<u64>(), pct in 1.0f64..100.0) {
        let mut rng = support::rng(seed);
        let values: Vec<f32> = (0..S * S).map(|_| rng.random::<f32>()).collect();
        let p = ebp_sampling_prior(&map_from(values), &MaskSpec::default(), pct).unwrap();
        prop_assert!(p.probs.iter().all(|&v| v >= 0.0));
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xfr_core::attribution::{ebp, ebp_prior_triplet};
use xfr_core::dise::{apply_mask, fill_image, sample_masks, MaskSpec, SamplingPrior};
use xfr_core::netcore::reference_architecture;
use xfr_core::subtree::{subtree_ebp, GradientOrientation};
use xfr_core::synth::{render_face, sample_identity, Nuisance};

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = reference_architecture(&mut rng);
    let face = |rng: &mut ChaCha8Rng| render_face(&sample_identity(rng), &Nuisance::none()).image;
    let probe = face(&mut rng);
    let m = net.embed(&face(&mut rng)).unwrap().into_data();
    let n = net.embed(&face(&mut rng)).unwrap().into_data();
    let (_, trace) = net.forward(&probe).unwrap();

    c.bench_function("forward", |b| b.iter(|| net.forward(&probe).unwrap()));
    c.bench_function("embed", |b| b.iter(|| net.embed(&probe).unwrap()));

    let g = n.iter().zip(&m).map(|(a, b)| 2.0 * (a - b)).collect::<Vec<f32>>();
    let g = xfr_core::Tensor::from_vec(&[g.len()], g).unwrap();
    c.bench_function("backward", |b| b.iter(|| net.backward(&trace, &g).unwrap()));

    let prior = ebp_prior_triplet(&m, &n).unwrap();
    c.bench_function("ebp", |b| b.iter(|| ebp(&net, &trace, &prior, 0).unwrap()));
    c.bench_function("subtree_k27", |b| {
        b.iter(|| subtree_ebp(&net, &trace, &m, &n, 2.0, 27, GradientOrientation::Descent).unwrap())
    });

    let spec = MaskSpec::default();
    let fill = fill_image(&probe, &spec).unwrap();
    let mask = sample_masks(&SamplingPrior::uniform(6, 6), &spec, 1, 0, 64, 64)
        .unwrap()
        .remove(0);
    c.bench_function("dise_mask_eval", |b| {
        b.iter(|| net.embed(&apply_mask(&probe, &mask.values, &fill).unwrap()).unwrap())
    });
    c.bench_function("blur_fill", |b| b.iter(|| fill_image(&probe, &spec).unwrap()));
}

criterion_group!(benches, bench);
criterion_main!(benches);

//! Toy trainer for the reference matcher: the embedding network plus a
//! temporary softmax identity head, optimised by mini-batch SGD with
//! momentum. The head is discarded afterwards.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfrError};
use crate::manifest::{DatasetManifest, Split};
use crate::netcore::{reference_architecture, NetworkGraph, ParamGrads, EMBEDDING_DIM};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    /// Multiplier on the head logits; the embedding is unit length so the
    /// head needs some gain to reach confident predictions.
    pub logit_scale: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            logit_scale: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub identities: usize,
    pub images: usize,
    pub epochs: Vec<EpochStats>,
}

/// Trains the reference matcher on the manifest's training split.
pub fn train_matcher(
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(NetworkGraph<f32>, TrainReport)> {
    let mut labels: BTreeMap<&str, usize> = BTreeMap::new();
    let mut samples = Vec::new();
    for rec in manifest.face_images(Split::Train) {
        let next = labels.len();
        let label = *labels.entry(rec.identity.as_str()).or_insert(next);
        samples.push((manifest.load_image(&rec.id)?, label));
    }
    train_on_images(&samples, labels.len(), config)
}

/// Trains on in-memory `(image, identity label)` pairs.
pub fn train_on_images(
    samples: &[(Tensor<f32>, usize)],
    classes: usize,
    config: &TrainConfig,
) -> Result<(NetworkGraph<f32>, TrainReport)> {
    let mut per_class = vec![0usize; classes];
    for (_, l) in samples {
        if *l >= classes {
            return Err(XfrError::DegenerateManifest(format!(
                "label {l} out of range for {classes} identities"
            )));
        }
        per_class[*l] += 1;
    }
    if classes < 2 {
        return Err(XfrError::DegenerateManifest(format!(
            "need at least 2 training identities, got {classes}"
        )));
    }
    if let Some(c) = per_class.iter().position(|&n| n < 2) {
        return Err(XfrError::DegenerateManifest(format!(
            "identity {c} has {} training images, need at least 2",
            per_class[c]
        )));
    }
    if config.batch_size == 0 {
        return Err(XfrError::InvalidArgument("batch size must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = reference_architecture(&mut rng);
    let mut probe_set: Vec<usize> = (0..samples.len()).collect();
    probe_set.shuffle(&mut rng);
    probe_set.truncate(INIT_SAMPLES);
    let probe_images: Vec<&Tensor<f32>> = probe_set.iter().map(|&i| &samples[i].0).collect();
    standardize_layers(&mut net, &probe_images)?;
    let mut head = imprinted_head(&net, samples, classes)?;

    let mut velocity = ParamGrads::zeros_like(&net);
    let mut head_velocity = vec![0.0f32; head.len()];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    let mut report = TrainReport {
        identities: classes,
        images: samples.len(),
        epochs: Vec::new(),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = ParamGrads::zeros_like(&net);
            let mut head_grad = vec![0.0f32; head.len()];
            for &i in batch {
                let (image, label) = (&samples[i].0, samples[i].1);
                let (emb, trace) = net.forward(image)?;
                let e = emb.data();
                let logits: Vec<f32> = head
                    .chunks(EMBEDDING_DIM)
                    .map(|row| config.logit_scale * row.iter().zip(e).map(|(a, b)| a * b).sum::<f32>())
                    .collect();
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exp: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
                let z: f32 = exp.iter().sum();
                let probs: Vec<f32> = exp.iter().map(|v| v / z).collect();
                loss_sum += -(probs[label].max(1e-30) as f64).ln();
                let argmax = logits
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &l)| if l > logits[best] { j } else { best });
                correct += usize::from(argmax == label);

                let mut grad_e = vec![0.0f32; EMBEDDING_DIM];
                for (c, row) in head.chunks(EMBEDDING_DIM).enumerate() {
                    let dl = config.logit_scale
                        * (probs[c] - if c == label { 1.0 } else { 0.0 });
                    for k in 0..EMBEDDING_DIM {
                        grad_e[k] += dl * row[k];
                        head_grad[c * EMBEDDING_DIM + k] += dl * e[k];
                    }
                }
                let grad_e = Tensor::from_vec(&[EMBEDDING_DIM], grad_e)?;
                net.backward_with_params(&trace, &grad_e, &mut grads)?;
            }
            let progress = step as f64 / total_steps as f64;
            let lr = config.learning_rate
                * (0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32;
            let inv = 1.0 / batch.len() as f32;
            sgd_update(&mut net, &grads, &mut velocity, lr, inv, config);
            for ((p, g), v) in head.iter_mut().zip(&head_grad).zip(head_velocity.iter_mut()) {
                let g = g * inv + config.weight_decay * *p;
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} accuracy {:.3}",
            stats.mean_loss,
            stats.train_accuracy
        );
        report.epochs.push(stats);
    }
    Ok((net, report))
}

/// Images used to standardize the initial layers.
const INIT_SAMPLES: usize = 64;

/// Data-dependent initialisation: rescales every conv and fc layer, in
/// order, so that its outputs over `images` have zero mean and unit
/// variance per channel. Without it the positive relu features make all
/// initial embeddings nearly parallel and the softmax head sees no signal.
fn standardize_layers(net: &mut NetworkGraph<f32>, images: &[&Tensor<f32>]) -> Result<()> {
    let param_layers: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.params().is_some())
        .map(|(i, _)| i)
        .collect();
    for idx in param_layers {
        let channels = net.layers()[idx].params().expect("param layer").1.len();
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for image in images {
            let (_, trace) = net.forward(image)?;
            let out = trace.output(idx).data();
            let per = out.len() / channels;
            for (c, plane) in out.chunks(per).enumerate() {
                for &v in plane {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += per;
        }
        let (w, b) = net
            .params_mut()
            .nth(idx)
            .flatten()
            .expect("param layer");
        let fan = w.len() / channels;
        for c in 0..channels {
            let mean = sum[c] / count as f64;
            let std = (sq[c] / count as f64 - mean * mean).max(0.0).sqrt();
            let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
            for v in &mut w.data_mut()[c * fan..(c + 1) * fan] {
                *v = (*v as f64 * scale) as f32;
            }
            b.data_mut()[c] = ((b.data()[c] as f64 - mean) * scale) as f32;
        }
    }
    Ok(())
}

/// Head rows start as the unit-length mean embedding of each identity
/// under the initial net, so the first steps already see a classifier
/// that is better than chance.
fn imprinted_head(
    net: &NetworkGraph<f32>,
    samples: &[(Tensor<f32>, usize)],
    classes: usize,
) -> Result<Vec<f32>> {
    let mut head = vec![0.0f64; classes * EMBEDDING_DIM];
    for (image, label) in samples {
        let emb = net.embed(image)?;
        for (h, &e) in head[label * EMBEDDING_DIM..].iter_mut().zip(emb.data()) {
            *h += e as f64;
        }
    }
    let mut out = Vec::with_capacity(head.len());
    for row in head.chunks(EMBEDDING_DIM) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        out.extend(row.iter().map(|v| (v * inv) as f32));
    }
    Ok(out)
}

fn sgd_update(
    net: &mut NetworkGraph<f32>,
    grads: &ParamGrads<f32>,
    velocity: &mut ParamGrads<f32>,
    lr: f32,
    grad_scale: f32,
    config: &TrainConfig,
) {
    for ((params, g), v) in net
        .params_mut()
        .zip(&grads.layers)
        .zip(velocity.layers.iter_mut())
    {
        if let (Some((w, b)), Some((gw, gb)), Some((vw, vb))) = (params, g, v) {
            for ((p, &g), v) in w.data_mut().iter_mut().zip(gw.data()).zip(vw.data_mut()) {
                let g = g * grad_scale + config.weight_decay * *p;
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
            for ((p, &g), v) in b.data_mut().iter_mut().zip(gb.data()).zip(vb.data_mut()) {
                *v = config.momentum * *v + g * grad_scale;
                *p -= lr * *v;
            }
        }
    }
}

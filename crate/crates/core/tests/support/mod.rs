//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use xfr_core::netcore::{ActivationTrace, Layer, LayerKind, NetworkGraph};
use xfr_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Layer<f64> {
    let scale = (2.0 / (9.0 * cin as f64)).sqrt() * 1.7;
    Layer::Conv3x3 {
        weight: uniform(rng, &[cout, cin, 3, 3], scale),
        bias: uniform(rng, &[cout], 0.1),
    }
}

pub fn fc(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Layer<f64> {
    let scale = (2.0 / input as f64).sqrt() * 1.7;
    Layer::FullyConnected {
        weight: uniform(rng, &[output, input], scale),
        bias: uniform(rng, &[output], 0.1),
    }
}

pub fn image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let n = c * h * w;
    Tensor::from_vec(&[c, h, w], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Small nets covering every layer kind, indexed by `variant`.
pub fn small_net(rng: &mut ChaCha8Rng, variant: usize) -> (NetworkGraph<f64>, [usize; 3]) {
    let layers = match variant % 5 {
        0 => vec![
            conv(rng, 3, 4),
            Layer::Relu,
            Layer::MaxPool2x2,
            conv(rng, 4, 6),
            Layer::Relu,
            Layer::GlobalAvgPool,
            fc(rng, 6, 5),
            Layer::L2Normalize,
        ],
        1 => vec![
            conv(rng, 3, 5),
            Layer::Relu,
            Layer::MaxPool2x2,
            fc(rng, 5 * 4 * 4, 6),
            Layer::Relu,
            fc(rng, 6, 4),
            Layer::L2Normalize,
        ],
        2 => vec![
            conv(rng, 3, 4),
            Layer::Relu,
            conv(rng, 4, 4),
            Layer::Relu,
            Layer::MaxPool2x2,
            conv(rng, 4, 8),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::L2Normalize,
        ],
        3 => vec![
            fc(rng, 3 * 8 * 8, 10),
            Layer::Relu,
            fc(rng, 10, 6),
            Layer::L2Normalize,
        ],
        _ => vec![
            conv(rng, 3, 6),
            Layer::Relu,
            Layer::MaxPool2x2,
            conv(rng, 6, 6),
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::GlobalAvgPool,
            fc(rng, 6, 3),
            Layer::L2Normalize,
        ],
    };
    (NetworkGraph::new(layers).unwrap(), [3, 8, 8])
}

/// ReLU sign pattern and pooling winners: the piecewise-linear region.
fn region_signature(trace: &ActivationTrace<f64>, net: &NetworkGraph<f64>) -> Vec<u32> {
    let mut sig = Vec::new();
    for (layer, rec) in net.layers().iter().zip(&trace.records) {
        match layer.kind() {
            LayerKind::Relu => sig.extend(rec.output.data().iter().map(|&v| (v > 0.0) as u32)),
            LayerKind::MaxPool2x2 => sig.extend(rec.argmax.as_ref().unwrap()),
            _ => {}
        }
    }
    sig
}

pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Nodes whose finite-difference stencil crossed a ReLU or pooling
    /// boundary, where the loss is not differentiable along the stencil.
    pub skipped: usize,
}

/// Compares analytic gradients of `loss = embedding[coord]` at every layer
/// output and the input with central differences of step `h`.
/// Relative error is `|a - f| / max(|a|, |f|, floor)` with
/// `floor = 1e-3 * max |a|` over all nodes.
pub fn finite_difference_check(
    net: &NetworkGraph<f64>,
    input: &Tensor<f64>,
    coord: usize,
    h: f64,
) -> FdReport {
    let (emb, trace) = net.forward(input).unwrap();
    let mut seed = vec![0.0; emb.len()];
    seed[coord] = 1.0;
    let grads = net
        .backward(&trace, &Tensor::from_vec(&[emb.len()], seed).unwrap())
        .unwrap();
    let floor = 1e-3
        * grads
            .layers
            .iter()
            .chain(std::iter::once(&grads.input))
            .flat_map(|g| g.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max);

    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    // Node sets: the input (start = 0) and the output of each layer l
    // (start = l + 1).
    let n = net.len();
    for start in 0..n {
        let base = if start == 0 { &trace.input } else { trace.output(start - 1) };
        let analytic = if start == 0 { &grads.input } else { &grads.layers[start - 1] };
        let sub = NetworkGraph::new(net.layers()[start..].to_vec()).unwrap();
        let (_, sub_trace) = sub.forward(base).unwrap();
        let sig = region_signature(&sub_trace, &sub);
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut x = base.clone();
                x.data_mut()[i] += delta;
                let (e, t) = sub.forward(&x).unwrap();
                (e.data()[coord], region_signature(&t, &sub))
            };
            let (fp, sp) = eval(h);
            let (fm, sm) = eval(-h);
            if sp != sig || sm != sig {
                report.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs()).max(floor).max(f64::MIN_POSITIVE);
            report.max_rel_err = report.max_rel_err.max((a - fd).abs() / denom);
            report.checked += 1;
        }
    }
    report
}

/// Explicit per-layer transition matrices `T[parent][child]` built from
/// the definition, multiplied out densely. Returns the mass at the input
/// of `stop` (flattened) and the dropped mass.
pub fn dense_ebp(
    net: &NetworkGraph<f64>,
    input: &Tensor<f64>,
    top: usize,
    prior: &[f64],
    stop: usize,
) -> (Vec<f64>, f64) {
    let acts = direct_forward_all(net, input);
    let mut mass = prior.to_vec();
    let mut dropped = 0.0;
    for l in (stop..=top).rev() {
        let (x, shape) = &acts[l];
        let a: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        let t = transition(&net.layers()[l], x, &a, shape);
        let mut child = vec![0.0; a.len()];
        for (j, row) in t.iter().enumerate() {
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                for (i, &v) in row.iter().enumerate() {
                    child[i] += mass[j] * v / z;
                }
            } else {
                dropped += mass[j];
            }
        }
        mass = child;
    }
    (mass, dropped)
}

/// Activations recomputed with direct loops, independent of the engine:
/// entry 0 is the input, entry `l + 1` the output of layer `l`.
fn direct_forward_all(net: &NetworkGraph<f64>, input: &Tensor<f64>) -> Vec<(Vec<f64>, Vec<usize>)> {
    let mut acts = vec![(input.data().to_vec(), input.shape().to_vec())];
    for layer in net.layers() {
        let (x, shape) = acts.last().unwrap().clone();
        acts.push(direct_forward(layer, &x, &shape));
    }
    acts
}

pub fn direct_activations(net: &NetworkGraph<f64>, input: &Tensor<f64>) -> Vec<Vec<f64>> {
    direct_forward_all(net, input).into_iter().map(|(x, _)| x).collect()
}

/// Unnormalized winner scores `T[parent][child]`.
fn transition(layer: &Layer<f64>, raw: &[f64], a: &[f64], shape: &[usize]) -> Vec<Vec<f64>> {
    let n_in = a.len();
    match layer {
        Layer::Conv3x3 { weight, .. } => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let o = weight.shape()[0];
            let wd = weight.data();
            let mut t = vec![vec![0.0; n_in]; o * h * w];
            for oc in 0..o {
                for y in 0..h {
                    for x in 0..w {
                        let row = &mut t[(oc * h + y) * w + x];
                        for ic in 0..c {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (yy, xx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    let ci = (ic * h + yy as usize) * w + xx as usize;
                                    let wv = wd[((oc * c + ic) * 3 + dy) * 3 + dx].max(0.0);
                                    row[ci] += a[ci] * wv;
                                }
                            }
                        }
                    }
                }
            }
            t
        }
        Layer::FullyConnected { weight, .. } => {
            let o = weight.shape()[0];
            (0..o)
                .map(|j| (0..n_in).map(|i| a[i] * weight.data()[j * n_in + i].max(0.0)).collect())
                .collect()
        }
        Layer::Relu | Layer::L2Normalize => (0..n_in)
            .map(|j| {
                let mut r = vec![0.0; n_in];
                r[j] = 1.0;
                r
            })
            .collect(),
        Layer::MaxPool2x2 => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut t = vec![vec![0.0; n_in]; c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        // first maximum of the raw inputs in the window
                        let mut best = None::<(usize, f64)>;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                                let v = raw[i];
                                if best.is_none_or(|(_, b)| v > b) {
                                    best = Some((i, v));
                                }
                            }
                        }
                        t[(ch * oh + y) * ow + x][best.unwrap().0] = 1.0;
                    }
                }
            }
            t
        }
        Layer::GlobalAvgPool => {
            let hw = shape[1] * shape[2];
            (0..shape[0])
                .map(|ch| {
                    let mut r = vec![0.0; n_in];
                    r[ch * hw..(ch + 1) * hw].copy_from_slice(&a[ch * hw..(ch + 1) * hw]);
                    r
                })
                .collect()
        }
    }
}

fn direct_forward(layer: &Layer<f64>, x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    match layer {
        Layer::Conv3x3 { weight, bias } => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let o = weight.shape()[0];
            let mut out = vec![0.0; o * h * w];
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = bias.data()[oc];
                        for ic in 0..c {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (yy, xi) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                    if yy < 0 || xi < 0 || yy >= h as isize || xi >= w as isize {
                                        continue;
                                    }
                                    s += weight.data()[((oc * c + ic) * 3 + dy) * 3 + dx]
                                        * x[(ic * h + yy as usize) * w + xi as usize];
                                }
                            }
                        }
                        out[(oc * h + y) * w + xx] = s;
                    }
                }
            }
            (out, vec![o, h, w])
        }
        Layer::Relu => (x.iter().map(|v| v.max(0.0)).collect(), shape.to_vec()),
        Layer::MaxPool2x2 => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let mut out = Vec::new();
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x[(ch * h + 2 * y + dy) * w + 2 * xx + dx]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
            (out, vec![c, h / 2, w / 2])
        }
        Layer::GlobalAvgPool => {
            let hw = shape[1] * shape[2];
            (
                x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect(),
                vec![shape[0]],
            )
        }
        Layer::FullyConnected { weight, bias } => {
            let o = weight.shape()[0];
            let n = x.len();
            (
                (0..o)
                    .map(|j| bias.data()[j] + (0..n).map(|i| weight.data()[j * n + i] * x[i]).sum::<f64>())
                    .collect(),
                vec![o],
            )
        }
        Layer::L2Normalize => {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            (x.iter().map(|v| v / norm).collect(), shape.to_vec())
        }
    }
}

/// Central difference of `loss(embedding)` with respect to one node of the
/// output of `layer`, or `None` if the stencil crosses a ReLU or pooling
/// boundary.
pub fn fd_node_gradient(
    net: &NetworkGraph<f64>,
    trace: &ActivationTrace<f64>,
    layer: usize,
    index: usize,
    loss: &dyn Fn(&[f64]) -> f64,
    h: f64,
) -> Option<f64> {
    let base = trace.output(layer);
    if layer + 1 == net.len() {
        let eval = |d: f64| {
            let mut x = base.data().to_vec();
            x[index] += d;
            loss(&x)
        };
        return Some((eval(h) - eval(-h)) / (2.0 * h));
    }
    let sub = NetworkGraph::new(net.layers()[layer + 1..].to_vec()).unwrap();
    let (_, t0) = sub.forward(base).unwrap();
    let sig = region_signature(&t0, &sub);
    let eval = |d: f64| {
        let mut x = base.clone();
        x.data_mut()[index] += d;
        let (e, t) = sub.forward(&x).unwrap();
        (loss(e.data()), region_signature(&t, &sub))
    };
    let (fp, sp) = eval(h);
    let (fm, sm) = eval(-h);
    (sp == sig && sm == sig).then(|| (fp - fm) / (2.0 * h))
}

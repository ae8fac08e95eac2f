//! Minimal convolutional engine: layered graph, forward pass with retained
//! activations, exact reverse-mode gradients, weight file and trainer.

pub mod format;
mod loss;
pub mod ops;
pub mod train;

use rand::Rng;
use rand_distr::StandardNormal;

pub use format::{load_weights, save_weights};
pub use loss::{triplet_loss, triplet_loss_grad};
pub use train::{train_matcher, TrainConfig, TrainReport};

use crate::error::{Result, XfrError};
use crate::tensor::{Real, Tensor};

/// Spatial size of the reference matcher's input.
pub const IMAGE_SIZE: usize = 64;
/// Embedding length of the reference matcher.
pub const EMBEDDING_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Relu,
    MaxPool2x2,
    GlobalAvgPool,
    FullyConnected,
    L2Normalize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Real = f32> {
    /// `weight`: `[out, in, 3, 3]`, `bias`: `[out]`; stride 1, zero padding 1.
    Conv3x3 { weight: Tensor<T>, bias: Tensor<T> },
    Relu,
    MaxPool2x2,
    GlobalAvgPool,
    /// `weight`: `[out, in]`, `bias`: `[out]`. Flattens its input.
    FullyConnected { weight: Tensor<T>, bias: Tensor<T> },
    L2Normalize,
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv3x3 { .. } => LayerKind::Conv3x3,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2x2 => LayerKind::MaxPool2x2,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::FullyConnected { .. } => LayerKind::FullyConnected,
            Layer::L2Normalize => LayerKind::L2Normalize,
        }
    }

    pub fn params(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match self {
            Layer::Conv3x3 { weight, bias } | Layer::FullyConnected { weight, bias } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            Layer::Conv3x3 { weight, bias } | Layer::FullyConnected { weight, bias } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv3x3 { weight, bias } => Layer::Conv3x3 {
                weight: weight.cast(),
                bias: bias.cast(),
            },
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2x2 => Layer::MaxPool2x2,
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::FullyConnected { weight, bias } => Layer::FullyConnected {
                weight: weight.cast(),
                bias: bias.cast(),
            },
            Layer::L2Normalize => Layer::L2Normalize,
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |input: &[usize]| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(XfrError::ShapeMismatch {
                    expected: vec![0, 0, 0],
                    actual: input.to_vec(),
                }),
            }
        };
        match self {
            Layer::Conv3x3 { weight, .. } => {
                let (c, h, w) = spatial(input)?;
                let (o, ci) = (weight.shape()[0], weight.shape()[1]);
                if c != ci {
                    return Err(XfrError::ShapeMismatch {
                        expected: vec![ci, h, w],
                        actual: input.to_vec(),
                    });
                }
                Ok(vec![o, h, w])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2x2 => {
                let (c, h, w) = spatial(input)?;
                if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                    return Err(XfrError::ShapeMismatch {
                        expected: vec![c, h + h % 2, w + w % 2],
                        actual: input.to_vec(),
                    });
                }
                Ok(vec![c, h / 2, w / 2])
            }
            Layer::GlobalAvgPool => {
                let (c, _, _) = spatial(input)?;
                Ok(vec![c])
            }
            Layer::FullyConnected { weight, .. } => {
                let (o, i) = (weight.shape()[0], weight.shape()[1]);
                let len: usize = input.iter().product();
                if len != i {
                    return Err(XfrError::ShapeMismatch {
                        expected: vec![i],
                        actual: input.to_vec(),
                    });
                }
                Ok(vec![o])
            }
            Layer::L2Normalize => {
                if input.len() != 1 {
                    return Err(XfrError::ShapeMismatch {
                        expected: vec![input.iter().product()],
                        actual: input.to_vec(),
                    });
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Output of one layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord<T: Real = f32> {
    pub output: Tensor<T>,
    /// Flat input index of each max-pool winner.
    pub argmax: Option<Vec<u32>>,
}

/// Everything a forward pass leaves behind for attribution and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T: Real = f32> {
    pub input: Tensor<T>,
    pub records: Vec<LayerRecord<T>>,
}

impl<T: Real> ActivationTrace<T> {
    /// Input to layer `idx` (the image for `idx == 0`).
    pub fn layer_input(&self, idx: usize) -> &Tensor<T> {
        if idx == 0 {
            &self.input
        } else {
            &self.records[idx - 1].output
        }
    }

    pub fn output(&self, idx: usize) -> &Tensor<T> {
        &self.records[idx].output
    }

    /// Final network output.
    pub fn embedding(&self) -> &Tensor<T> {
        &self.records.last().expect("trace has at least one layer").output
    }

    /// Embedding before the trailing normalization layer (the final output
    /// if the graph does not end in one).
    pub fn pre_normalization(&self) -> &Tensor<T> {
        let n = self.records.len();
        if n >= 2 {
            &self.records[n - 2].output
        } else {
            &self.input
        }
    }
}

/// Gradients of a scalar loss with respect to every layer output and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTrace<T: Real = f32> {
    pub input: Tensor<T>,
    pub layers: Vec<Tensor<T>>,
}

/// Gradients of a scalar loss with respect to every weight and bias.
#[derive(Debug, Clone)]
pub struct ParamGrads<T: Real = f32> {
    pub layers: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(net: &NetworkGraph<T>) -> Self {
        ParamGrads {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    l.params()
                        .map(|(w, b)| (Tensor::zeros(w.shape()), Tensor::zeros(b.shape())))
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.data_mut().iter_mut().for_each(|v| *v = *v * s);
            b.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn add(&mut self, other: &ParamGrads<T>) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some((w, b)), Some((ow, ob))) = (mine, theirs) {
                for (a, &x) in w.data_mut().iter_mut().zip(ow.data()) {
                    *a = *a + x;
                }
                for (a, &x) in b.data_mut().iter_mut().zip(ob.data()) {
                    *a = *a + x;
                }
            }
        }
    }
}

/// Ordered layer stack. Immutable once built; all inference is read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph<T: Real = f32> {
    layers: Vec<Layer<T>>,
}

/// Shape bookkeeping for validation without a concrete input size.
#[derive(Debug, Clone, Copy)]
enum SymShape {
    Unknown,
    Spatial(usize),
    Flat(usize),
}

impl<T: Real> NetworkGraph<T> {
    /// Builds a graph after checking that layer shapes chain.
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        let net = NetworkGraph { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Same graph in a different precision.
    pub fn cast<U: Real>(&self) -> NetworkGraph<U> {
        NetworkGraph {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    /// Indices of the ReLU layers, shallowest first.
    pub fn relu_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind() == LayerKind::Relu)
            .map(|(i, _)| i)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(XfrError::Validation {
                layer: 0,
                reason: "network has no layers".into(),
            });
        }
        let mut shape = SymShape::Unknown;
        for (idx, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| XfrError::Validation { layer: idx, reason };
            if let Some((w, b)) = layer.params() {
                if !w.all_finite() || !b.all_finite() {
                    return Err(fail("non-finite parameter".into()));
                }
            }
            shape = match (layer, shape) {
                (Layer::Conv3x3 { weight, bias }, s) => {
                    let ws = weight.shape();
                    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
                        return Err(fail(format!("conv weight shape {ws:?} is not [o, i, 3, 3]")));
                    }
                    if bias.shape() != [ws[0]] {
                        return Err(fail(format!(
                            "conv bias shape {:?} does not match {} outputs",
                            bias.shape(),
                            ws[0]
                        )));
                    }
                    match s {
                        SymShape::Unknown => {}
                        SymShape::Spatial(c) if c == ws[1] => {}
                        other => {
                            return Err(fail(format!(
                                "conv expects {} input channels, got {other:?}",
                                ws[1]
                            )))
                        }
                    }
                    SymShape::Spatial(ws[0])
                }
                (Layer::Relu, s) => s,
                (Layer::MaxPool2x2, s @ (SymShape::Spatial(_) | SymShape::Unknown)) => s,
                (Layer::GlobalAvgPool, SymShape::Spatial(c)) => SymShape::Flat(c),
                (Layer::GlobalAvgPool | Layer::L2Normalize, SymShape::Unknown) => SymShape::Unknown,
                (Layer::FullyConnected { weight, bias }, s) => {
                    let ws = weight.shape();
                    if ws.len() != 2 {
                        return Err(fail(format!("fc weight shape {ws:?} is not [o, i]")));
                    }
                    if bias.shape() != [ws[0]] {
                        return Err(fail(format!(
                            "fc bias shape {:?} does not match {} outputs",
                            bias.shape(),
                            ws[0]
                        )));
                    }
                    match s {
                        SymShape::Flat(n) if n != ws[1] => {
                            return Err(fail(format!("fc expects {} inputs, got {n}", ws[1])))
                        }
                        SymShape::Spatial(c) if ws[1] % c != 0 => {
                            return Err(fail(format!(
                                "fc expects {} inputs, not a multiple of {c} channels",
                                ws[1]
                            )))
                        }
                        _ => {}
                    }
                    SymShape::Flat(ws[0])
                }
                (Layer::L2Normalize, s @ SymShape::Flat(_)) => s,
                (l, s) => {
                    return Err(fail(format!("{:?} cannot follow shape {s:?}", l.kind())));
                }
            };
        }
        Ok(())
    }

    fn apply(&self, idx: usize, input: &Tensor<T>) -> Result<LayerRecord<T>> {
        let layer = &self.layers[idx];
        let out_shape = layer.output_shape(input.shape())?;
        let x = input.data();
        let (data, argmax) = match layer {
            Layer::Conv3x3 { weight, bias } => {
                let (c, h, w) = input.chw().expect("checked by output_shape");
                let o = weight.shape()[0];
                (
                    ops::conv3x3(x, c, h, w, weight.data(), Some(bias.data()), o),
                    None,
                )
            }
            Layer::Relu => (x.iter().map(|&v| v.max(T::zero())).collect(), None),
            Layer::MaxPool2x2 => {
                let (c, h, w) = input.chw().expect("checked by output_shape");
                let (v, a) = ops::maxpool2x2(x, c, h, w);
                (v, Some(a))
            }
            Layer::GlobalAvgPool => {
                let (c, h, w) = input.chw().expect("checked by output_shape");
                (ops::global_avg_pool(x, c, h * w), None)
            }
            Layer::FullyConnected { weight, bias } => (
                ops::fully_connected(x, weight.data(), Some(bias.data()), weight.shape()[0]),
                None,
            ),
            Layer::L2Normalize => (ops::l2_normalize(x), None),
        };
        Ok(LayerRecord {
            output: Tensor::from_vec(&out_shape, data)?,
            argmax,
        })
    }

    /// Runs the whole graph, keeping every layer output.
    pub fn forward(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ActivationTrace<T>)> {
        let mut records: Vec<LayerRecord<T>> = Vec::with_capacity(self.layers.len());
        for idx in 0..self.layers.len() {
            let input = records.last().map(|r| &r.output).unwrap_or(image);
            let rec = self.apply(idx, input)?;
            records.push(rec);
        }
        let trace = ActivationTrace {
            input: image.clone(),
            records,
        };
        Ok((trace.embedding().clone(), trace))
    }

    /// Embedding only.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_from(0, image)
    }

    /// Runs layers `start..` on `input`, which stands in for the input of
    /// layer `start`.
    pub fn forward_from(&self, start: usize, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = input.clone();
        for idx in start..self.layers.len() {
            cur = self.apply(idx, &cur)?.output;
        }
        Ok(cur)
    }

    pub(crate) fn check_trace(&self, trace: &ActivationTrace<T>) -> Result<()> {
        if trace.records.len() != self.layers.len() {
            return Err(XfrError::TraceMismatch(format!(
                "{} records for {} layers",
                trace.records.len(),
                self.layers.len()
            )));
        }
        let mut shape = trace.input.shape().to_vec();
        for (idx, (layer, rec)) in self.layers.iter().zip(&trace.records).enumerate() {
            let expected = layer
                .output_shape(&shape)
                .map_err(|e| XfrError::TraceMismatch(format!("layer {idx}: {e}")))?;
            if expected != rec.output.shape() {
                return Err(XfrError::TraceMismatch(format!(
                    "layer {idx}: output shape {:?}, expected {expected:?}",
                    rec.output.shape()
                )));
            }
            if layer.kind() == LayerKind::MaxPool2x2
                && rec.argmax.as_ref().map(Vec::len) != Some(rec.output.len())
            {
                return Err(XfrError::TraceMismatch(format!(
                    "layer {idx}: missing pooling winners"
                )));
            }
            shape = expected;
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar loss whose gradient at the final
    /// output is `loss_grad`.
    pub fn backward(
        &self,
        trace: &ActivationTrace<T>,
        loss_grad: &Tensor<T>,
    ) -> Result<GradientTrace<T>> {
        self.backward_impl(trace, loss_grad, None)
    }

    /// Like [`backward`](Self::backward), also accumulating parameter gradients
    /// into `params`.
    pub fn backward_with_params(
        &self,
        trace: &ActivationTrace<T>,
        loss_grad: &Tensor<T>,
        params: &mut ParamGrads<T>,
    ) -> Result<GradientTrace<T>> {
        self.backward_impl(trace, loss_grad, Some(params))
    }

    fn backward_impl(
        &self,
        trace: &ActivationTrace<T>,
        loss_grad: &Tensor<T>,
        mut params: Option<&mut ParamGrads<T>>,
    ) -> Result<GradientTrace<T>> {
        self.check_trace(trace)?;
        if loss_grad.shape() != trace.embedding().shape() {
            return Err(XfrError::ShapeMismatch {
                expected: trace.embedding().shape().to_vec(),
                actual: loss_grad.shape().to_vec(),
            });
        }
        let n = self.layers.len();
        let mut grads: Vec<Tensor<T>> = vec![Tensor::zeros(&[0]); n];
        grads[n - 1] = loss_grad.clone();
        let mut input_grad = Tensor::zeros(trace.input.shape());
        for idx in (0..n).rev() {
            let g_out = grads[idx].data();
            let input = trace.layer_input(idx);
            let rec = &trace.records[idx];
            let x = input.data();
            let g_in: Vec<T> = match &self.layers[idx] {
                Layer::Conv3x3 { weight, .. } => {
                    let (c, h, w) = input.chw().expect("validated trace");
                    let o = weight.shape()[0];
                    if let Some(Some((dw, db))) = params.as_mut().map(|p| &mut p.layers[idx]) {
                        ops::conv3x3_param_grads(x, c, h, w, g_out, o, dw.data_mut(), db.data_mut());
                    }
                    ops::conv3x3_transpose(g_out, o, h, w, weight.data(), c)
                }
                Layer::Relu => rec
                    .output
                    .data()
                    .iter()
                    .zip(g_out)
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect(),
                Layer::MaxPool2x2 => ops::unpool(
                    g_out,
                    rec.argmax.as_ref().expect("validated trace"),
                    input.len(),
                ),
                Layer::GlobalAvgPool => {
                    let (_, h, w) = input.chw().expect("validated trace");
                    let hw = h * w;
                    let scale = T::one() / T::from_f64(hw as f64);
                    g_out
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
                        .collect()
                }
                Layer::FullyConnected { weight, .. } => {
                    if let Some(Some((dw, db))) = params.as_mut().map(|p| &mut p.layers[idx]) {
                        let i = x.len();
                        for (o, &g) in g_out.iter().enumerate() {
                            let row = &mut dw.data_mut()[o * i..(o + 1) * i];
                            for (d, &xi) in row.iter_mut().zip(x) {
                                *d = *d + g * xi;
                            }
                            db.data_mut()[o] = db.data()[o] + g;
                        }
                    }
                    ops::fully_connected_transpose(g_out, weight.data(), x.len())
                }
                Layer::L2Normalize => ops::l2_normalize_backward(x, rec.output.data(), g_out),
            };
            let g_in = Tensor::from_vec(input.shape(), g_in)?;
            if idx == 0 {
                input_grad = g_in;
            } else {
                grads[idx - 1] = g_in;
            }
        }
        Ok(GradientTrace {
            input: input_grad,
            layers: grads,
        })
    }

    /// Applies `param -= lr * grad` (plus momentum bookkeeping in the trainer).
    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = Option<(&mut Tensor<T>, &mut Tensor<T>)>> {
        self.layers.iter_mut().map(|l| l.params_mut())
    }
}

/// Layer list of the reference matcher (without weights): three conv-relu-pool
/// stages of 16, 32 and 64 channels, a 128-channel conv-relu, global average
/// pooling, a 64-d projection and normalization.
pub fn reference_architecture<R: Rng + ?Sized>(rng: &mut R) -> NetworkGraph<f32> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &cout) in [16usize, 32, 64, 128].iter().enumerate() {
        layers.push(he_conv(rng, cin, cout));
        layers.push(Layer::Relu);
        if i < 3 {
            layers.push(Layer::MaxPool2x2);
        }
        cin = cout;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(he_fc(rng, cin, EMBEDDING_DIM));
    layers.push(Layer::L2Normalize);
    NetworkGraph::new(layers).expect("reference architecture chains")
}

/// He-initialised 3x3 convolution with zero bias.
pub fn he_conv<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize) -> Layer<f32> {
    let std = (2.0 / (cin * 9) as f64).sqrt();
    let w = (0..cout * cin * 9)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect();
    Layer::Conv3x3 {
        weight: Tensor::from_vec(&[cout, cin, 3, 3], w).expect("sized"),
        bias: Tensor::zeros(&[cout]),
    }
}

/// He-initialised fully connected layer with zero bias.
pub fn he_fc<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Layer<f32> {
    let std = (2.0 / input as f64).sqrt();
    let w = (0..output * input)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect();
    Layer::FullyConnected {
        weight: Tensor::from_vec(&[output, input], w).expect("sized"),
        bias: Tensor::zeros(&[output]),
    }
}

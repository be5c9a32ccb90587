//! The classifier: a stack of dense, convolution, pooling and ReLU layers with
//! a cross-entropy head.
//!
//! Backpropagation is written per layer. A single backward pass can produce
//! parameter gradients (for SGD), input gradients (for crafting attacks), or
//! both.

mod checkpoint;
mod layers;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{gemm_slices, log_softmax_in_place, Tensor};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// One layer of the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Relu,
    /// Valid (unpadded) square convolution.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    /// Non-overlapping square max pooling; trailing rows/cols are dropped.
    MaxPool2d { kernel: usize },
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => write!(f, "dense({in_dim}, {out_dim})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => write!(f, "conv2d({in_ch}, {out_ch}, k={kernel}, s={stride})"),
            LayerSpec::MaxPool2d { kernel } => write!(f, "maxpool2d({kernel})"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

/// Per-example feature layout flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl FeatureShape {
    pub fn size(&self) -> usize {
        match *self {
            FeatureShape::Flat(d) => d,
            FeatureShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FeatureShape::Flat(d) => write!(f, "flat({d})"),
            FeatureShape::Image {
                channels,
                height,
                width,
            } => write!(f, "image({channels}x{height}x{width})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Identifies one parameter tensor: the layer index plus weight or bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer<S> {
    spec: LayerSpec,
    input: FeatureShape,
    output: FeatureShape,
    weight: Option<Tensor<S>>,
    bias: Option<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    input: FeatureShape,
    layers: Vec<Layer<S>>,
    seed: u64,
}

/// Cross-entropy (nats) of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport<S> {
    pub mean_loss: S,
    pub per_example_loss: Vec<S>,
    pub log_probs: Tensor<S>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<S> {
    /// Present iff parameter gradients were requested.
    pub by_parameter: Option<BTreeMap<ParamId, Tensor<S>>>,
    /// Present iff the input gradient was requested.
    pub by_input: Option<Tensor<S>>,
}

/// How per-example losses are combined before differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Reduction {
    Mean,
    /// Gradients are those of each example's own loss.
    Sum,
}

/// Layer list for a fully connected ReLU network.
pub fn mlp_specs(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = input_dim;
    for &h in hidden {
        specs.push(LayerSpec::Dense {
            in_dim: prev,
            out_dim: h,
        });
        specs.push(LayerSpec::Relu);
        prev = h;
    }
    specs.push(LayerSpec::Dense {
        in_dim: prev,
        out_dim: classes,
    });
    specs
}

/// conv 3×3×16 → relu → pool 2 → conv 3×3×32 → relu → pool 2 → flatten → dense.
pub fn small_cnn_specs(channels: usize, height: usize, width: usize, classes: usize) -> Vec<LayerSpec> {
    let h = ((height - 2) / 2 - 2) / 2;
    let w = ((width - 2) / 2 - 2) / 2;
    vec![
        LayerSpec::Conv2d {
            in_ch: channels,
            out_ch: 16,
            kernel: 3,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2 },
        LayerSpec::Conv2d {
            in_ch: 16,
            out_ch: 32,
            kernel: 3,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            in_dim: 32 * h * w,
            out_dim: classes,
        },
    ]
}

fn output_shape(spec: &LayerSpec, incoming: FeatureShape) -> Option<FeatureShape> {
    match (*spec, incoming) {
        (LayerSpec::Dense { in_dim, out_dim }, FeatureShape::Flat(d)) if d == in_dim && out_dim > 0 => {
            Some(FeatureShape::Flat(out_dim))
        }
        (LayerSpec::Relu, s) => Some(s),
        (LayerSpec::Flatten, s) => Some(FeatureShape::Flat(s.size())),
        (
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            },
            FeatureShape::Image {
                channels,
                height,
                width,
            },
        ) if channels == in_ch
            && out_ch > 0
            && kernel > 0
            && stride > 0
            && kernel <= height
            && kernel <= width =>
        {
            Some(FeatureShape::Image {
                channels: out_ch,
                height: (height - kernel) / stride + 1,
                width: (width - kernel) / stride + 1,
            })
        }
        (
            LayerSpec::MaxPool2d { kernel },
            FeatureShape::Image {
                channels,
                height,
                width,
            },
        ) if kernel > 0 && kernel <= height && kernel <= width => Some(FeatureShape::Image {
            channels,
            height: height / kernel,
            width: width / kernel,
        }),
        _ => None,
    }
}

/// Builds a network whose input layout is inferred from the first dense layer.
pub fn init_network<S: Scalar>(specs: &[LayerSpec], seed: u64) -> Result<Network<S>> {
    let input = match specs.first() {
        Some(LayerSpec::Dense { in_dim, .. }) => FeatureShape::Flat(*in_dim),
        Some(other) => {
            return Err(Error::Construction {
                index: 0,
                layer: other.to_string(),
                incoming: "an unknown input layout (use Network::new)".into(),
            })
        }
        None => return Err(Error::validation("network needs at least one layer")),
    };
    Network::new(input, specs, seed)
}

impl<S: Scalar> Network<S> {
    /// Validates that `specs` chain from `input` to a flat logit vector and
    /// draws weights from U(±sqrt(6/fan_in)) with zero biases.
    pub fn new(input: FeatureShape, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(input, specs, seed)?;
        for (index, layer) in net.layers.iter_mut().enumerate() {
            if let Some(w) = layer.weight.as_mut() {
                let fan_in = w.len() / w.shape()[0];
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, "init", &[index as u64]);
                for v in w.as_mut_slice() {
                    let u: f64 = rand::Rng::random_range(&mut r, -bound..bound);
                    *v = S::from_f64_lossy(u);
                }
            }
        }
        Ok(net)
    }

    /// Same topology as [`Network::new`] with every parameter zero.
    pub fn zeroed(input: FeatureShape, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::validation("network needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        for (index, spec) in specs.iter().enumerate() {
            let out = output_shape(spec, shape).ok_or_else(|| Error::Construction {
                index,
                layer: spec.to_string(),
                incoming: if index == 0 {
                    format!("input {shape}")
                } else {
                    format!("layer {} ({}) producing {shape}", index - 1, specs[index - 1])
                },
            })?;
            let (weight, bias) = match *spec {
                LayerSpec::Dense { in_dim, out_dim } => (
                    Some(Tensor::zeros(vec![out_dim, in_dim])?),
                    Some(Tensor::zeros(vec![out_dim])?),
                ),
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => (
                    Some(Tensor::zeros(vec![out_ch, in_ch, kernel, kernel])?),
                    Some(Tensor::zeros(vec![out_ch])?),
                ),
                _ => (None, None),
            };
            layers.push(Layer {
                spec: *spec,
                input: shape,
                output: out,
                weight,
                bias,
            });
            shape = out;
        }
        match shape {
            FeatureShape::Flat(k) if k >= 2 => {}
            other => {
                return Err(Error::validation(format!(
                    "network must end in at least 2 flat logits, ends in {other}"
                )))
            }
        }
        Ok(Network {
            input,
            layers,
            seed,
        })
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.input
    }

    pub fn input_dim(&self) -> usize {
        self.input.size()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output.size())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// All parameter tensors in layer order, weight before bias.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<S>)> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            if let Some(w) = &l.weight {
                out.push((
                    ParamId {
                        layer,
                        kind: ParamKind::Weight,
                    },
                    w,
                ));
            }
            if let Some(b) = &l.bias {
                out.push((
                    ParamId {
                        layer,
                        kind: ParamKind::Bias,
                    },
                    b,
                ));
            }
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        let l = self.layers.get(id.layer)?;
        match id.kind {
            ParamKind::Weight => l.weight.as_ref(),
            ParamKind::Bias => l.bias.as_ref(),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<S>> {
        let l = self.layers.get_mut(id.layer)?;
        match id.kind {
            ParamKind::Weight => l.weight.as_mut(),
            ParamKind::Bias => l.bias.as_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<usize> {
        match x.shape() {
            [b, d] if *d == self.input_dim() => Ok(*b),
            other => Err(Error::Dimension {
                op: "forward",
                left: other.to_vec(),
                right: vec![0, self.input_dim()],
            }),
        }
    }

    fn check_labels(&self, batch: usize, y: &[usize]) -> Result<()> {
        if y.len() != batch {
            return Err(Error::Dimension {
                op: "labels",
                left: vec![y.len()],
                right: vec![batch],
            });
        }
        let k = self.num_classes();
        if let Some((i, &label)) = y.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::validation(format!(
                "label {label} at index {i} is outside [0, {k})"
            )));
        }
        Ok(())
    }

    /// Logits for a `B×input_dim` batch.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for l in &self.layers {
            a = l.forward(&a)?;
        }
        Ok(a)
    }

    fn forward_cached(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in &self.layers {
            let next = l.forward(acts.last().expect("nonempty"))?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Row-wise log-probabilities.
    pub fn log_probs(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut z = self.forward(x)?;
        for i in 0..z.rows() {
            log_softmax_in_place(z.row_mut(i));
        }
        Ok(z)
    }

    /// Mean cross-entropy and the requested gradient blocks.
    pub fn loss_and_grads(
        &self,
        x: &Tensor<S>,
        y: &[usize],
        need_input_grad: bool,
        need_param_grad: bool,
    ) -> Result<(LossReport<S>, Gradients<S>)> {
        self.loss_and_grads_with(x, y, Reduction::Mean, need_input_grad, need_param_grad)
    }

    pub(crate) fn loss_and_grads_with(
        &self,
        x: &Tensor<S>,
        y: &[usize],
        reduction: Reduction,
        need_input_grad: bool,
        need_param_grad: bool,
    ) -> Result<(LossReport<S>, Gradients<S>)> {
        let batch = self.check_input(x)?;
        self.check_labels(batch, y)?;
        let mut acts = self.forward_cached(x)?;
        let mut log_probs = acts.pop().expect("logits");
        for i in 0..batch {
            log_softmax_in_place(log_probs.row_mut(i));
        }
        let per_example_loss: Vec<S> = y
            .iter()
            .enumerate()
            .map(|(i, &label)| -log_probs.row(i)[label])
            .collect();
        let n = S::from_usize(batch).expect("batch size fits the scalar type");
        let mean_loss = per_example_loss.iter().copied().sum::<S>() / n;
        let report = LossReport {
            mean_loss,
            per_example_loss,
            log_probs,
        };
        if !need_input_grad && !need_param_grad {
            return Ok((report, Gradients::default()));
        }

        // d loss / d logits = softmax - onehot
        let scale = match reduction {
            Reduction::Mean => S::one() / n,
            Reduction::Sum => S::one(),
        };
        let mut delta = report.log_probs.map(|v| v.exp());
        for (i, &label) in y.iter().enumerate() {
            let row = delta.row_mut(i);
            row[label] = row[label] - S::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        }

        let mut by_parameter = need_param_grad.then(BTreeMap::new);
        for (index, l) in self.layers.iter().enumerate().rev() {
            let need_delta_in = index > 0 || need_input_grad;
            let (d_in, grads) = l.backward(&acts[index], &delta, need_param_grad, need_delta_in)?;
            if let (Some(map), Some((gw, gb))) = (by_parameter.as_mut(), grads) {
                map.insert(
                    ParamId {
                        layer: index,
                        kind: ParamKind::Weight,
                    },
                    gw,
                );
                map.insert(
                    ParamId {
                        layer: index,
                        kind: ParamKind::Bias,
                    },
                    gb,
                );
            }
            match d_in {
                Some(d) => delta = d,
                None => break,
            }
        }
        let by_input = need_input_grad.then_some(delta);
        Ok((
            report,
            Gradients {
                by_parameter,
                by_input,
            },
        ))
    }

    /// `θ ← θ − lr·∇θ`; every parameter must have a matching gradient.
    pub fn sgd_step(&mut self, grads: &Gradients<S>, lr: S) -> Result<()> {
        if !(lr >= S::zero()) || !lr.is_finite() {
            return Err(Error::validation(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        let map = grads
            .by_parameter
            .as_ref()
            .ok_or_else(|| Error::validation("parameter gradients missing"))?;
        for (id, p) in self.params() {
            match map.get(&id) {
                None => {
                    return Err(Error::validation(format!(
                        "gradient for {id:?} missing"
                    )))
                }
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::Dimension {
                        op: "sgd_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        for (id, g) in map {
            if let Some(p) = self.param_mut(*id) {
                for (v, &d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *v = *v - lr * d;
                }
            }
        }
        Ok(())
    }

    /// Fraction of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, x: &Tensor<S>, y: &[usize]) -> Result<f64> {
        let logits = self.forward(x)?;
        self.check_labels(logits.rows(), y)?;
        Ok(accuracy_from_scores(&logits, y))
    }
}

/// Accuracy of arg-max predictions (lowest index on ties).
pub fn accuracy_from_scores<S: Scalar>(scores: &Tensor<S>, y: &[usize]) -> f64 {
    let pred = scores.argmax_rows();
    let correct = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    correct as f64 / y.len().max(1) as f64
}

impl<S: Scalar> Layer<S> {
    fn forward(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let batch = a.rows();
        match self.spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = self.weight.as_ref().expect("dense weight");
                let b = self.bias.as_ref().expect("dense bias");
                let mut out = Vec::with_capacity(batch * out_dim);
                for _ in 0..batch {
                    out.extend_from_slice(b.as_slice());
                }
                // z = a·Wᵀ + b
                gemm_slices(
                    batch,
                    in_dim,
                    out_dim,
                    a.as_slice(),
                    in_dim as isize,
                    1,
                    w.as_slice(),
                    1,
                    in_dim as isize,
                    &mut out,
                    S::one(),
                );
                Tensor::matrix(batch, out_dim, out)
            }
            LayerSpec::Relu => Ok(a.relu()),
            LayerSpec::Flatten => Ok(a.clone()),
            LayerSpec::Conv2d { .. } => layers::conv_forward(self, a),
            LayerSpec::MaxPool2d { kernel } => layers::maxpool_forward(self.input, kernel, a),
        }
    }

    /// Returns the gradient w.r.t. this layer's input (if asked) and the
    /// weight/bias gradients for parametric layers (if asked).
    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        input: &Tensor<S>,
        delta: &Tensor<S>,
        need_params: bool,
        need_input: bool,
    ) -> Result<(Option<Tensor<S>>, Option<(Tensor<S>, Tensor<S>)>)> {
        let batch = input.rows();
        match self.spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = self.weight.as_ref().expect("dense weight");
                let params = if need_params {
                    // dW = δᵀ·a, db = Σ_rows δ
                    let mut gw = vec![S::zero(); out_dim * in_dim];
                    gemm_slices(
                        out_dim,
                        batch,
                        in_dim,
                        delta.as_slice(),
                        1,
                        out_dim as isize,
                        input.as_slice(),
                        in_dim as isize,
                        1,
                        &mut gw,
                        S::zero(),
                    );
                    let mut gb = vec![S::zero(); out_dim];
                    for i in 0..batch {
                        for (g, &d) in gb.iter_mut().zip(delta.row(i)) {
                            *g = *g + d;
                        }
                    }
                    Some((
                        Tensor::matrix(out_dim, in_dim, gw)?,
                        Tensor::vector(gb)?,
                    ))
                } else {
                    None
                };
                let d_in = if need_input {
                    let mut d = vec![S::zero(); batch * in_dim];
                    gemm_slices(
                        batch,
                        out_dim,
                        in_dim,
                        delta.as_slice(),
                        out_dim as isize,
                        1,
                        w.as_slice(),
                        in_dim as isize,
                        1,
                        &mut d,
                        S::zero(),
                    );
                    Some(Tensor::matrix(batch, in_dim, d)?)
                } else {
                    None
                };
                Ok((d_in, params))
            }
            LayerSpec::Relu => {
                let d = need_input.then(|| {
                    let mut d = delta.clone();
                    for (g, &a) in d.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if a <= S::zero() {
                            *g = S::zero();
                        }
                    }
                    d
                });
                Ok((d, None))
            }
            LayerSpec::Flatten => Ok((need_input.then(|| delta.clone()), None)),
            LayerSpec::Conv2d { .. } => layers::conv_backward(self, input, delta, need_params, need_input),
            LayerSpec::MaxPool2d { kernel } => Ok((
                need_input.then(|| layers::maxpool_backward(self.input, kernel, input, delta)),
                None,
            )),
        }
    }
}

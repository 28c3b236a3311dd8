//! Layers, architecture descriptors, forward passes and SGD.
//!
//! Architectures are written as comma-separated layer tokens with
//! colon-separated sizes:
//!
//! ```text
//! dense:<in>:<out>        fully connected, weight [in, out] + bias [out]
//! conv2d:<cin>:<cout>     3x3 conv, stride 1, pad 1, weight [cout, cin, 3, 3] + bias [cout]
//! relu
//! flatten                 [C, H, W] -> [C*H*W]
//! gmp                     global max-pool, [C, H, W] -> [C] (alias: global_max_pool)
//! ```
//!
//! The final layer of a classifier is its head; every layer before it is
//! the body, which is partitioned into contiguous groups for hint transfer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize },
    Relu,
    Flatten,
    GlobalMaxPool,
}

impl LayerSpec {
    fn token(&self) -> String {
        match self {
            LayerSpec::Dense { inputs, outputs } => format!("dense:{inputs}:{outputs}"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => format!("conv2d:{in_channels}:{out_channels}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::GlobalMaxPool => "gmp".into(),
        }
    }

    /// Per-example output shape, or a reason the input does not fit.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match (*self, input) {
            (LayerSpec::Dense { inputs, outputs }, [n]) if *n == inputs => Ok(vec![outputs]),
            (LayerSpec::Dense { inputs, .. }, _) => Err(format!("dense expects [{inputs}], got {input:?}")),
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                },
                [c, h, w],
            ) if *c == in_channels => Ok(vec![out_channels, *h, *w]),
            (LayerSpec::Conv2d { in_channels, .. }, _) => {
                Err(format!("conv2d expects [{in_channels}, H, W], got {input:?}"))
            }
            (LayerSpec::Relu, _) => Ok(input.to_vec()),
            (LayerSpec::Flatten, _) => Ok(vec![input.iter().product()]),
            (LayerSpec::GlobalMaxPool, [c, _, _]) => Ok(vec![*c]),
            (LayerSpec::GlobalMaxPool, _) => Err(format!("gmp expects [C, H, W], got {input:?}")),
        }
    }
}

/// Parses an architecture descriptor into layer specs.
pub fn parse_descriptor(descriptor: &str) -> Result<Vec<LayerSpec>> {
    let trimmed = descriptor.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .enumerate()
        .map(|(index, raw)| {
            let token = raw.trim();
            let bad = |reason: &str| Error::Descriptor {
                index,
                token: token.to_string(),
                reason: reason.to_string(),
            };
            let parts: Vec<&str> = token.split(':').collect();
            let size = |s: &str| -> Result<usize> {
                match s.parse::<usize>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err(bad("sizes must be positive integers")),
                }
            };
            match parts.as_slice() {
                ["dense", i, o] => Ok(LayerSpec::Dense {
                    inputs: size(i)?,
                    outputs: size(o)?,
                }),
                ["conv2d" | "conv", i, o] => Ok(LayerSpec::Conv2d {
                    in_channels: size(i)?,
                    out_channels: size(o)?,
                }),
                ["relu"] => Ok(LayerSpec::Relu),
                ["flatten"] => Ok(LayerSpec::Flatten),
                ["gmp" | "global_max_pool"] => Ok(LayerSpec::GlobalMaxPool),
                ["dense" | "conv2d" | "conv", ..] => Err(bad("expected two sizes")),
                _ => Err(bad("unknown layer kind")),
            }
        })
        .collect()
}

/// Splits `len` layers into `groups` near-equal contiguous runs; the first
/// `len % groups` runs get one extra layer. Returns exclusive end indices.
pub fn partition(len: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || groups > len {
        return Err(Error::Config(format!(
            "cannot split {len} body layers into {groups} groups"
        )));
    }
    let (base, extra) = (len / groups, len % groups);
    let mut end = 0;
    Ok((0..groups)
        .map(|g| {
            end += base + usize::from(g < extra);
            end
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
struct ParamSlot {
    weight: usize,
    bias: usize,
}

/// Ordered layer stack with named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    descriptor: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Tensor)>,
    group_boundaries: Vec<usize>,
    feature_layer: usize,
}

/// Graph handles captured during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Output of each group's final layer, shallow to deep.
    pub group_outputs: Vec<Var>,
    pub feature_map: Var,
    params: Vec<Var>,
}

/// A forward pass materialized as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceValues {
    pub logits: Tensor,
    pub group_outputs: Vec<Tensor>,
    pub feature_map: Tensor,
}

impl Model {
    /// Builds any layer stack (classifier, regressor, or empty).
    pub fn from_descriptor(descriptor: &str, input_shape: &[usize], seed: u64) -> Result<Self> {
        let layers = parse_descriptor(descriptor)?;
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.to_vec();
        if current.is_empty() || current.contains(&0) {
            return Err(Error::shape(
                "build_model",
                format!("bad input shape {input_shape:?}"),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            current = layer
                .output_shape(&current)
                .map_err(|e| Error::shape("build_model", format!("layer {i}: {e}")))?;
            shapes.push(current.clone());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let (wdims, fan_in, fan_out, nbias) = match *layer {
                LayerSpec::Dense { inputs, outputs } => (vec![inputs, outputs], inputs, outputs, outputs),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                } => (
                    vec![out_channels, in_channels, 3, 3],
                    in_channels * 9,
                    out_channels * 9,
                    out_channels,
                ),
                _ => continue,
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = wdims.iter().product();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.push((format!("{i}.weight"), Tensor::new(wdims, w)?.trainable()));
            params.push((format!("{i}.bias"), Tensor::zeros(&[nbias]).trainable()));
        }

        let feature_layer = if let Some(last4) = shapes.iter().rposition(|s| s.len() == 3) {
            last4
        } else {
            layers.len().saturating_sub(2)
        };
        let body = layers.len().saturating_sub(1);
        let group_boundaries = if body > 0 { vec![body] } else { Vec::new() };

        Ok(Model {
            descriptor: layers.iter().map(LayerSpec::token).collect::<Vec<_>>().join(","),
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
            params,
            group_boundaries,
            feature_layer,
        })
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-example output shape of the final layer.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input_shape)
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn group_boundaries(&self) -> &[usize] {
        &self.group_boundaries
    }

    pub fn num_groups(&self) -> usize {
        self.group_boundaries.len()
    }

    /// Number of layers before the head.
    pub fn body_len(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// Re-partitions the body into `groups` near-equal contiguous groups.
    pub fn set_groups(&mut self, groups: usize) -> Result<()> {
        self.group_boundaries = partition(self.body_len(), groups)?;
        Ok(())
    }

    pub fn set_group_boundaries(&mut self, boundaries: Vec<usize>) -> Result<()> {
        let ok = boundaries.windows(2).all(|w| w[0] < w[1])
            && boundaries.first().is_some_and(|&b| b > 0)
            && boundaries.last() == Some(&self.body_len());
        if !ok {
            return Err(Error::Config(format!(
                "group boundaries {boundaries:?} must increase strictly and end at {}",
                self.body_len()
            )));
        }
        self.group_boundaries = boundaries;
        Ok(())
    }

    pub fn feature_layer(&self) -> usize {
        self.feature_layer
    }

    /// Per-example shape of the feature map.
    pub fn feature_shape(&self) -> &[usize] {
        self.shapes
            .get(self.feature_layer)
            .map(Vec::as_slice)
            .unwrap_or(&self.input_shape)
    }

    /// Per-example shape of each group output.
    pub fn group_output_shapes(&self) -> Vec<&[usize]> {
        self.group_boundaries
            .iter()
            .map(|&b| self.shapes[b - 1].as_slice())
            .collect()
    }

    fn slots(&self) -> Vec<Option<ParamSlot>> {
        let mut next = 0;
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let slot = ParamSlot {
                        weight: next,
                        bias: next + 1,
                    };
                    next += 2;
                    Some(slot)
                }
                _ => None,
            })
            .collect()
    }

    /// Runs the model on `x` (`[N, input_shape...]`).
    ///
    /// With `trainable` the parameters enter the graph as differentiable
    /// leaves; otherwise they are constants.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<ForwardTrace> {
        let xd = g.dims(x);
        if xd.len() != self.input_shape.len() + 1 || xd[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} does not match input shape {:?}", xd, self.input_shape),
            ));
        }
        let batch = xd[0];
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t) } else { g.constant(t) })
            .collect();
        let slots = self.slots();

        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                LayerSpec::Dense { .. } => {
                    let s = slots[i].expect("dense layer has parameters");
                    let z = g.matmul(h, params[s.weight])?;
                    g.add_row_bias(z, params[s.bias])?
                }
                LayerSpec::Conv2d { .. } => {
                    let s = slots[i].expect("conv layer has parameters");
                    let z = g.conv2d(h, params[s.weight])?;
                    g.add_channel_bias(z, params[s.bias])?
                }
                LayerSpec::Relu => g.relu(h),
                LayerSpec::Flatten => {
                    let mut dims = vec![batch];
                    dims.extend(&self.shapes[i]);
                    g.reshape(h, dims)?
                }
                LayerSpec::GlobalMaxPool => g.global_max_pool_batch(h)?,
            };
            outputs.push(h);
        }

        Ok(ForwardTrace {
            logits: h,
            group_outputs: self.group_boundaries.iter().map(|&b| outputs[b - 1]).collect(),
            feature_map: outputs.get(self.feature_layer).copied().unwrap_or(x),
            params,
        })
    }

    /// Adds the graph gradients of a trainable forward pass into the
    /// parameter gradient slots.
    pub fn accumulate_grads(&mut self, g: &Graph, trace: &ForwardTrace) {
        for ((_, t), &v) in self.params.iter_mut().zip(&trace.params) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    /// Inference-only forward pass returning plain tensors.
    pub fn forward_values(&self, batch: &Tensor) -> Result<TraceValues> {
        let mut g = Graph::new();
        let x = g.constant(batch);
        let trace = self.forward(&mut g, x, false)?;
        Ok(TraceValues {
            logits: g.to_tensor(trace.logits),
            group_outputs: trace.group_outputs.iter().map(|&v| g.to_tensor(v)).collect(),
            feature_map: g.to_tensor(trace.feature_map),
        })
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_values(batch)?.logits)
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.params_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }
}

/// Builds a classifier whose head emits `num_classes` logits.
pub fn build_model(arch: &str, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Model> {
    let model = Model::from_descriptor(arch, input_shape, seed)?;
    match model.layers.last() {
        Some(LayerSpec::Dense { outputs, .. }) if *outputs == num_classes => Ok(model),
        Some(LayerSpec::Dense { outputs, .. }) => Err(Error::shape(
            "build_model",
            format!(
                "layer {}: head emits {outputs} logits, dataset has {num_classes} classes",
                model.layers.len() - 1
            ),
        )),
        _ => Err(Error::shape(
            "build_model",
            "classifier must end with a dense head",
        )),
    }
}

/// SGD with momentum and a piecewise-constant step-decay schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(base_lr: f64, decay_epochs: Vec<usize>, decay_factor: f64, momentum: f64) -> Result<Self> {
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {base_lr}"
            )));
        }
        if decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "decay epochs must be strictly increasing, got {decay_epochs:?}"
            )));
        }
        Ok(SgdState {
            base_lr,
            decay_epochs,
            decay_factor,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr * self.decay_factor.powi(decays as i32)
    }

    /// One update over `params` (order must be stable across calls);
    /// clears every gradient afterwards.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>, epoch: usize) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::State(format!("trainable tensor {i} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(&params)
                .any(|(v, p)| v.len() != p.numel())
        {
            return Err(Error::State("parameter set changed between SGD steps".into()));
        }
        let lr = self.lr(epoch);
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().expect("checked above").to_vec();
            for ((w, v), g) in p.values_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Applies one SGD step to the student, the adapter (when trained) and the
/// hint regressors, in that order.
pub fn sgd_step(
    model: &mut Model,
    adapter: Option<&mut AdapterParams>,
    regressors: &mut [Model],
    state: &mut SgdState,
    epoch: usize,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = model.params_mut().collect();
    if let Some(a) = adapter {
        params.extend(a.params_mut());
    }
    for r in regressors.iter_mut() {
        params.extend(r.params_mut());
    }
    state.step(params, epoch)
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::MlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s.clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
            }
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

// Keeps sigmoid outputs strictly inside (0, 1).
const SIGMOID_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    BinaryCrossEntropy,
}

/// Architecture of a dense feed-forward model with a single output.
///
/// `layer_widths` lists the input width first and the output width last.
/// `activations` has one entry per hidden layer; the output activation is
/// implied by the loss (identity for mse, sigmoid for binary cross-entropy).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activations: Vec<Activation>,
    pub loss: LossKind,
}

impl ModelSpec {
    pub fn linear(inputs: usize, loss: LossKind) -> Self {
        Self {
            kind: ModelKind::Linear,
            layer_widths: vec![inputs, 1],
            activations: Vec::new(),
            loss,
        }
    }

    pub fn mlp(layer_widths: Vec<usize>, hidden: Activation, loss: LossKind) -> Self {
        let hidden_layers = layer_widths.len().saturating_sub(2);
        Self {
            kind: ModelKind::Mlp,
            layer_widths,
            activations: vec![hidden; hidden_layers],
            loss,
        }
    }

    pub fn validate(&self) -> Result<(), MlError> {
        let bad = |reason: String| Err(MlError::InvalidSpec(reason));
        if self.layer_widths.len() < 2 {
            return bad("at least an input and an output width are required".into());
        }
        if self.layer_widths.contains(&0) {
            return bad("all layer widths must be at least 1".into());
        }
        if *self.layer_widths.last().unwrap() != 1 {
            return bad("output width must be 1".into());
        }
        let hidden = self.layer_widths.len() - 2;
        if self.activations.len() != hidden {
            return bad(format!(
                "{} hidden layers need {} activations, got {}",
                hidden,
                hidden,
                self.activations.len()
            ));
        }
        if self.kind == ModelKind::Linear && self.layer_widths.len() != 2 {
            return bad("linear models have exactly two widths".into());
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layer_count() {
            match self.loss {
                LossKind::Mse => Activation::Identity,
                LossKind::BinaryCrossEntropy => Activation::Sigmoid,
            }
        } else {
            self.activations[layer]
        }
    }

    /// Number of scalar parameters in layers `[lo, hi)`.
    pub fn parameter_count(&self, lo: usize, hi: usize) -> usize {
        (lo..hi)
            .map(|l| self.layer_widths[l] * self.layer_widths[l + 1] + self.layer_widths[l + 1])
            .sum()
    }
}

/// One dense layer: `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_width(&self) -> usize {
        self.weights.rows()
    }

    fn parameter_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

impl Model {
    /// Uniform initialization on [-0.5, 0.5].
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self, MlError> {
        spec.validate()?;
        let layers = init_layers(spec, 0, spec.layer_count(), rng);
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn from_layers(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self, MlError> {
        spec.validate()?;
        check_layer_shapes(&spec, 0, &layers)?;
        Ok(Self { spec, layers })
    }

    pub fn whole_segment(&self) -> ModelSegment {
        ModelSegment {
            parent_spec: self.spec.clone(),
            lo: 0,
            hi: self.layers.len(),
            layers: self.layers.clone(),
        }
    }
}

fn init_layers<R: Rng + ?Sized>(spec: &ModelSpec, lo: usize, hi: usize, rng: &mut R) -> Vec<Layer> {
    (lo..hi)
        .map(|l| {
            let (inp, out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let weights: Vec<f64> = (0..inp * out).map(|_| rng.random_range(-0.5..=0.5)).collect();
            let bias: Vec<f64> = (0..out).map(|_| rng.random_range(-0.5..=0.5)).collect();
            Layer {
                weights: Matrix::from_vec(out, inp, weights).expect("sized buffer"),
                bias,
                activation: spec.activation(l),
            }
        })
        .collect()
}

fn check_layer_shapes(spec: &ModelSpec, lo: usize, layers: &[Layer]) -> Result<(), MlError> {
    for (i, layer) in layers.iter().enumerate() {
        let l = lo + i;
        if l >= spec.layer_count() {
            return Err(MlError::InvalidSpec(format!("layer {l} beyond spec")));
        }
        let (inp, out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        if layer.in_width() != inp || layer.out_width() != out || layer.bias.len() != out {
            return Err(MlError::Dimension {
                context: "layer parameters",
                expected: inp * out + out,
                actual: layer.parameter_count(),
            });
        }
        if layer.activation != spec.activation(l) {
            return Err(MlError::InvalidSpec(format!("layer {l} activation differs from spec")));
        }
    }
    Ok(())
}

/// Contiguous layer range `[lo, hi)` of a parent model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSegment {
    pub parent_spec: ModelSpec,
    pub lo: usize,
    pub hi: usize,
    pub layers: Vec<Layer>,
}

impl ModelSegment {
    /// Freshly initialized segment over `[lo, hi)` of `spec`.
    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        lo: usize,
        hi: usize,
        rng: &mut R,
    ) -> Result<Self, MlError> {
        spec.validate()?;
        if lo >= hi || hi > spec.layer_count() {
            return Err(MlError::InvalidCut(format!(
                "segment [{lo}, {hi}) outside 0..{}",
                spec.layer_count()
            )));
        }
        Ok(Self {
            parent_spec: spec.clone(),
            lo,
            hi,
            layers: init_layers(spec, lo, hi, rng),
        })
    }

    pub fn in_width(&self) -> usize {
        self.parent_spec.layer_widths[self.lo]
    }

    pub fn out_width(&self) -> usize {
        self.parent_spec.layer_widths[self.hi]
    }

    pub fn covers_output(&self) -> bool {
        self.hi == self.parent_spec.layer_count()
    }
}

/// Shared parameter access for models and segments.
pub trait Parameterized {
    /// Parent-model index of the first held layer.
    fn layer_offset(&self) -> usize;
    fn layers(&self) -> &[Layer];
    fn layers_mut(&mut self) -> &mut [Layer];

    fn layer_range(&self) -> (usize, usize) {
        (self.layer_offset(), self.layer_offset() + self.layers().len())
    }

    fn parameter_len(&self) -> usize {
        self.layers().iter().map(Layer::parameter_count).sum()
    }

    /// Weights (row-major) then bias, layer by layer.
    fn flatten_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_len());
        for layer in self.layers() {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    fn load_parameters(&mut self, flat: &[f64]) -> Result<(), MlError> {
        let expected = self.parameter_len();
        if flat.len() != expected {
            return Err(MlError::Dimension {
                context: "parameter vector",
                expected,
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for layer in self.layers_mut() {
            let w = layer.weights.as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&flat[at..at + b]);
            at += b;
        }
        Ok(())
    }

    /// Flattened parameters of parent layers `[lo, hi)`, which must be held.
    fn flatten_range(&self, lo: usize, hi: usize) -> Result<Vec<f64>, MlError> {
        let layers = self.held_range(lo, hi)?;
        let mut out = Vec::new();
        for layer in layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        Ok(out)
    }

    fn load_range(&mut self, lo: usize, hi: usize, flat: &[f64]) -> Result<(), MlError> {
        self.held_range(lo, hi)?;
        let offset = self.layer_offset();
        let layers = &mut self.layers_mut()[lo - offset..hi - offset];
        let expected: usize = layers.iter().map(Layer::parameter_count).sum();
        if flat.len() != expected {
            return Err(MlError::Dimension {
                context: "parameter range",
                expected,
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for layer in layers {
            let w = layer.weights.as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&flat[at..at + b]);
            at += b;
        }
        Ok(())
    }

    #[doc(hidden)]
    fn held_range(&self, lo: usize, hi: usize) -> Result<&[Layer], MlError> {
        let (own_lo, own_hi) = self.layer_range();
        if lo < own_lo || hi > own_hi || lo >= hi {
            return Err(MlError::InvalidCut(format!(
                "layers [{lo}, {hi}) not held by [{own_lo}, {own_hi})"
            )));
        }
        Ok(&self.layers()[lo - own_lo..hi - own_lo])
    }
}

impl Parameterized for Model {
    fn layer_offset(&self) -> usize {
        0
    }
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

impl Parameterized for ModelSegment {
    fn layer_offset(&self) -> usize {
        self.lo
    }
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Mean-over-batch parameter gradients for layers starting at `layer_offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub layer_offset: usize,
    pub layers: Vec<LayerGrad>,
    pub sample_count: usize,
}

impl GradientSet {
    pub fn zeros_like<P: Parameterized + ?Sized>(target: &P, sample_count: usize) -> Self {
        Self {
            layer_offset: target.layer_offset(),
            layers: target
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.out_width(), l.in_width()),
                    bias: vec![0.0; l.out_width()],
                })
                .collect(),
            sample_count,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weights.as_slice());
            out.extend_from_slice(&g.bias);
        }
        out
    }

    /// Rebuilds a gradient set shaped like `target` from a flat vector.
    pub fn from_flat<P: Parameterized + ?Sized>(
        target: &P,
        flat: &[f64],
        sample_count: usize,
    ) -> Result<Self, MlError> {
        let mut set = Self::zeros_like(target, sample_count);
        let expected = target.parameter_len();
        if flat.len() != expected {
            return Err(MlError::Dimension {
                context: "gradient vector",
                expected,
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for g in &mut set.layers {
            let w = g.weights.as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let b = g.bias.len();
            g.bias.copy_from_slice(&flat[at..at + b]);
            at += b;
        }
        Ok(set)
    }

    /// Joins gradient sets of adjacent segments, front to back.
    pub fn concat(parts: Vec<GradientSet>) -> Result<GradientSet, MlError> {
        let mut iter = parts.into_iter();
        let mut first = iter.next().ok_or(MlError::Empty("gradient sets"))?;
        for part in iter {
            if part.layer_offset != first.layer_offset + first.layers.len() {
                return Err(MlError::InvalidCut("gradient sets are not adjacent".into()));
            }
            first.layers.extend(part.layers);
        }
        Ok(first)
    }
}

/// Activations recorded by a forward pass, consumed by the matching backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCache {
    pub lo: usize,
    pub hi: usize,
    /// Input to each layer, in order.
    inputs: Vec<Matrix>,
    /// Post-activation output of each layer.
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> Option<&Matrix> {
        self.outputs.last()
    }

    pub fn batch_rows(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

fn forward_layer(layer: &Layer, input: &Matrix) -> Matrix {
    let (n, inp, out) = (input.rows(), layer.in_width(), layer.out_width());
    let mut z = Matrix::zeros(n, out);
    let w = layer.weights.as_slice();
    for i in 0..n {
        let x = input.row(i);
        for j in 0..out {
            let wj = &w[j * inp..(j + 1) * inp];
            let mut acc = 0.0;
            for k in 0..inp {
                acc += x[k] * wj[k];
            }
            z.set(i, j, layer.activation.apply(acc + layer.bias[j]));
        }
    }
    z
}

fn check_input(layers: &[Layer], input: &Matrix) -> Result<(), MlError> {
    let expected = layers.first().map_or(0, Layer::in_width);
    if input.rows() > 0 && input.cols() != expected {
        return Err(MlError::Dimension {
            context: "input width",
            expected,
            actual: input.cols(),
        });
    }
    Ok(())
}

fn forward_layers(layers: &[Layer], input: &Matrix) -> Result<Matrix, MlError> {
    check_input(layers, input)?;
    if input.rows() == 0 {
        return Ok(Matrix::zeros(0, layers.last().map_or(0, Layer::out_width)));
    }
    let mut current = forward_layer(&layers[0], input);
    for layer in &layers[1..] {
        current = forward_layer(layer, &current);
    }
    Ok(current)
}

fn forward_layers_cached(
    layers: &[Layer],
    lo: usize,
    input: &Matrix,
) -> Result<(Matrix, ForwardCache), MlError> {
    check_input(layers, input)?;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut outputs = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        let next = forward_layer(layer, &current);
        if !next.is_finite() {
            return Err(MlError::Numeric { layer: lo + i });
        }
        inputs.push(current);
        outputs.push(next.clone());
        current = next;
    }
    Ok((
        current,
        ForwardCache {
            lo,
            hi: lo + layers.len(),
            inputs,
            outputs,
        },
    ))
}

fn backward_layers(
    layers: &[Layer],
    lo: usize,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<(GradientSet, Matrix), MlError> {
    if cache.lo != lo || cache.hi != lo + layers.len() || cache.inputs.len() != layers.len() {
        return Err(MlError::MissingCache {
            lo,
            hi: lo + layers.len(),
        });
    }
    let n = cache.batch_rows();
    let out_width = layers.last().map_or(0, Layer::out_width);
    if upstream.cols() != out_width || upstream.rows() != n {
        return Err(MlError::Dimension {
            context: "upstream gradient",
            expected: n * out_width,
            actual: upstream.rows() * upstream.cols(),
        });
    }
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(layers.len());
    let mut delta_in = upstream.clone();
    for idx in (0..layers.len()).rev() {
        let layer = &layers[idx];
        let (inp, out) = (layer.in_width(), layer.out_width());
        let x = &cache.inputs[idx];
        let a = &cache.outputs[idx];
        let mut delta = Matrix::zeros(n, out);
        for i in 0..n {
            for j in 0..out {
                let d = delta_in.get(i, j) * layer.activation.derivative_from_output(a.get(i, j));
                delta.set(i, j, d);
            }
        }
        let mut gw = Matrix::zeros(out, inp);
        let mut gb = vec![0.0; out];
        for j in 0..out {
            for k in 0..inp {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += delta.get(i, j) * x.get(i, k);
                }
                gw.set(j, k, acc);
            }
            let mut acc = 0.0;
            for i in 0..n {
                acc += delta.get(i, j);
            }
            gb[j] = acc;
        }
        let mut downstream = Matrix::zeros(n, inp);
        let w = layer.weights.as_slice();
        for i in 0..n {
            for k in 0..inp {
                let mut acc = 0.0;
                for j in 0..out {
                    acc += delta.get(i, j) * w[j * inp + k];
                }
                downstream.set(i, k, acc);
            }
        }
        if !gw.is_finite() || !gb.iter().all(|v| v.is_finite()) || !downstream.is_finite() {
            return Err(MlError::Numeric { layer: lo + idx });
        }
        grads.push(LayerGrad {
            weights: gw,
            bias: gb,
        });
        delta_in = downstream;
    }
    grads.reverse();
    Ok((
        GradientSet {
            layer_offset: lo,
            layers: grads,
            sample_count: n.max(1),
        },
        delta_in,
    ))
}

/// Predictions for every row of `batch`.
pub fn forward(model: &Model, batch: &Matrix) -> Result<Vec<f64>, MlError> {
    Ok(forward_layers(&model.layers, batch)?.into_vec())
}

pub fn forward_segment(seg: &ModelSegment, input: &Matrix) -> Result<Matrix, MlError> {
    forward_layers(&seg.layers, input)
}

/// Forward pass that also records what `backward_segment` needs.
pub fn forward_segment_cached(
    seg: &ModelSegment,
    input: &Matrix,
) -> Result<(Matrix, ForwardCache), MlError> {
    forward_layers_cached(&seg.layers, seg.lo, input)
}

/// Parameter gradients of `seg` and the gradient with respect to its input.
pub fn backward_segment(
    seg: &ModelSegment,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<(GradientSet, Matrix), MlError> {
    backward_layers(&seg.layers, seg.lo, cache, upstream)
}

/// Full-model gradients and mean loss over the batch.
pub fn backward(model: &Model, batch: &Matrix, targets: &[f64]) -> Result<(GradientSet, f64), MlError> {
    if batch.rows() != targets.len() {
        return Err(MlError::Dimension {
            context: "targets",
            expected: batch.rows(),
            actual: targets.len(),
        });
    }
    if batch.rows() == 0 {
        return Err(MlError::Empty("batch"));
    }
    check_targets(model.spec.loss, targets)?;
    let (out, cache) = forward_layers_cached(&model.layers, 0, batch)?;
    let predictions = out.as_slice();
    let loss = loss_value(model.spec.loss, predictions, targets)?;
    let upstream = Matrix::column(&loss_gradient(model.spec.loss, predictions, targets)?);
    let (grads, _) = backward_layers(&model.layers, 0, &cache, &upstream)?;
    Ok((grads, loss))
}

pub fn check_targets(loss: LossKind, targets: &[f64]) -> Result<(), MlError> {
    if loss == LossKind::BinaryCrossEntropy && targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(MlError::InvalidTargets);
    }
    Ok(())
}

/// Mean loss. Mse is the mean of squared errors without a one-half factor.
pub fn loss_value(loss: LossKind, predictions: &[f64], targets: &[f64]) -> Result<f64, MlError> {
    check_lengths(predictions, targets)?;
    let n = predictions.len() as f64;
    let mut acc = 0.0;
    for (&p, &y) in predictions.iter().zip(targets) {
        acc += match loss {
            LossKind::Mse => (p - y) * (p - y),
            LossKind::BinaryCrossEntropy => -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()),
        };
    }
    let value = acc / n;
    if !value.is_finite() {
        return Err(MlError::NonFiniteLoss);
    }
    Ok(value)
}

/// Gradient of the mean loss with respect to each prediction.
pub fn loss_gradient(loss: LossKind, predictions: &[f64], targets: &[f64]) -> Result<Vec<f64>, MlError> {
    check_lengths(predictions, targets)?;
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| match loss {
            LossKind::Mse => 2.0 * (p - y) / n,
            LossKind::BinaryCrossEntropy => (p - y) / (p * (1.0 - p) * n),
        })
        .collect())
}

/// `targets - predictions`.
///
/// For mse this is the negative per-sample loss gradient divided by two; for
/// binary cross-entropy it is the negative gradient with respect to the logit.
pub fn compute_pseudo_residuals(
    predictions: &[f64],
    targets: &[f64],
    _loss: LossKind,
) -> Result<Vec<f64>, MlError> {
    check_lengths(predictions, targets)?;
    Ok(predictions.iter().zip(targets).map(|(&p, &y)| y - p).collect())
}

/// Converts pseudo-residuals back to the mean-loss gradient w.r.t. predictions.
pub fn residual_to_output_gradient(
    loss: LossKind,
    residuals: &[f64],
    predictions: &[f64],
) -> Result<Vec<f64>, MlError> {
    check_lengths(predictions, residuals)?;
    let n = predictions.len() as f64;
    Ok(residuals
        .iter()
        .zip(predictions)
        .map(|(&r, &p)| match loss {
            LossKind::Mse => -2.0 * r / n,
            LossKind::BinaryCrossEntropy => -r / (p * (1.0 - p) * n),
        })
        .collect())
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<(), MlError> {
    if a.len() != b.len() {
        return Err(MlError::Dimension {
            context: "vector length",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// SGD step `p <- p - lr * g` on every held layer.
pub fn apply_update<P: Parameterized + ?Sized>(
    target: &mut P,
    grads: &GradientSet,
    learning_rate: f64,
) -> Result<(), MlError> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(MlError::InvalidLearningRate(learning_rate));
    }
    if grads.layer_offset != target.layer_offset() || grads.layers.len() != target.layers().len() {
        return Err(MlError::Dimension {
            context: "gradient layers",
            expected: target.layers().len(),
            actual: grads.layers.len(),
        });
    }
    for (layer, g) in target.layers().iter().zip(&grads.layers) {
        if layer.weights.rows() != g.weights.rows()
            || layer.weights.cols() != g.weights.cols()
            || layer.bias.len() != g.bias.len()
        {
            return Err(MlError::Dimension {
                context: "gradient shape",
                expected: layer.parameter_count(),
                actual: g.weights.as_slice().len() + g.bias.len(),
            });
        }
    }
    for (layer, g) in target.layers_mut().iter_mut().zip(&grads.layers) {
        for (p, &d) in layer.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
            *p -= learning_rate * d;
        }
        for (p, &d) in layer.bias.iter_mut().zip(&g.bias) {
            *p -= learning_rate * d;
        }
    }
    Ok(())
}

/// Splits a model at the given layer boundaries; k cuts give k + 1 segments.
pub fn split_model(model: &Model, cut_points: &[usize]) -> Result<Vec<ModelSegment>, MlError> {
    let count = model.layers.len();
    let mut prev = 0;
    for &cut in cut_points {
        if cut <= prev || cut >= count {
            return Err(MlError::InvalidCut(format!(
                "cut {cut} must be strictly increasing within (0, {count})"
            )));
        }
        prev = cut;
    }
    let mut bounds = Vec::with_capacity(cut_points.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(cut_points);
    bounds.push(count);
    Ok(bounds
        .windows(2)
        .map(|w| ModelSegment {
            parent_spec: model.spec.clone(),
            lo: w[0],
            hi: w[1],
            layers: model.layers[w[0]..w[1]].to_vec(),
        })
        .collect())
}

/// Inverse of [`split_model`].
pub fn reassemble(segments: &[ModelSegment]) -> Result<Model, MlError> {
    let first = segments.first().ok_or(MlError::Empty("segments"))?;
    let spec = first.parent_spec.clone();
    let mut expected = 0;
    let mut layers = Vec::with_capacity(spec.layer_count());
    for seg in segments {
        if seg.lo != expected || seg.parent_spec != spec {
            return Err(MlError::InvalidCut("segments do not tile the parent model".into()));
        }
        expected = seg.hi;
        layers.extend(seg.layers.iter().cloned());
    }
    if expected != spec.layer_count() {
        return Err(MlError::InvalidCut("segments do not cover the parent model".into()));
    }
    Model::from_layers(spec, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: f64, b: f64) -> Model {
        let spec = ModelSpec::linear(1, LossKind::Mse);
        Model::from_layers(
            spec,
            vec![Layer {
                weights: Matrix::from_vec(1, 1, vec![w]).unwrap(),
                bias: vec![b],
                activation: Activation::Identity,
            }],
        )
        .unwrap()
    }

    fn mlp(widths: Vec<usize>, seed: u64) -> Model {
        let spec = ModelSpec::mlp(widths, Activation::Relu, LossKind::Mse);
        Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn linear_forward_single_multiply() {
        let m = linear(2.0, 0.0);
        let x = Matrix::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(forward(&m, &x).unwrap(), vec![6.0]);
    }

    #[test]
    fn empty_batch_gives_empty_predictions() {
        let m = mlp(vec![3, 4, 1], 0);
        let x = Matrix::zeros(0, 3);
        assert!(forward(&m, &x).unwrap().is_empty());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = mlp(vec![3, 4, 1], 0);
        let x = Matrix::zeros(2, 2);
        assert!(matches!(forward(&m, &x), Err(MlError::Dimension { .. })));
    }

    #[test]
    fn sigmoid_outputs_stay_open() {
        let spec = ModelSpec::linear(1, LossKind::BinaryCrossEntropy);
        let mut m = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.layers[0].weights.set(0, 0, 1e6);
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![0.0]]).unwrap();
        for p in forward(&m, &x).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let m = linear(0.0, 0.0);
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let (g, loss) = backward(&m, &x, &[0.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_differentiated_linear_gradient() {
        // L = (w*x + b - y)^2 ; dL/dw = 2 (1 - 0) * 1 = 2, dL/db = 2.
        let m = linear(1.0, 0.0);
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let (g, loss) = backward(&m, &x, &[0.0]).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g.flatten(), vec![2.0, 2.0]);
        assert_eq!(g.sample_count, 1);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let spec = ModelSpec::linear(1, LossKind::BinaryCrossEntropy);
        let m = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(backward(&m, &x, &[0.5]), Err(MlError::InvalidTargets)));
    }

    #[test]
    fn non_finite_reports_layer() {
        let mut m = mlp(vec![1, 2, 1], 3);
        m.layers[1].weights.set(0, 0, f64::INFINITY);
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        match backward(&m, &x, &[0.0, 1.0]) {
            Err(MlError::Numeric { layer }) => assert_eq!(layer, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn identity_segment_passes_input() {
        let spec = ModelSpec::mlp(vec![2, 2, 1], Activation::Identity, LossKind::Mse);
        let mut model = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        model.layers[0].weights = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        model.layers[0].bias = vec![0.0, 0.0];
        let seg = &split_model(&model, &[1]).unwrap()[0];
        let x = Matrix::from_rows(&[vec![0.25, -3.0], vec![7.0, 1.5]]).unwrap();
        assert_eq!(forward_segment(seg, &x).unwrap(), x);
    }

    #[test]
    fn whole_segment_matches_model() {
        let m = mlp(vec![3, 5, 4, 1], 9);
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 0.5]]).unwrap();
        let seg = m.whole_segment();
        assert_eq!(forward_segment(&seg, &x).unwrap().into_vec(), forward(&m, &x).unwrap());

        let y = [0.3, -0.7];
        let (full, _) = backward(&m, &x, &y).unwrap();
        let (out, cache) = forward_segment_cached(&seg, &x).unwrap();
        let up = Matrix::column(&loss_gradient(LossKind::Mse, out.as_slice(), &y).unwrap());
        let (g, _) = backward_segment(&seg, &cache, &up).unwrap();
        assert_eq!(g, full);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = mlp(vec![3, 4, 1], 2);
        let seg = m.whole_segment();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let (_, cache) = forward_segment_cached(&seg, &x).unwrap();
        let (g, down) = backward_segment(&seg, &cache, &Matrix::zeros(1, 1)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(down.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_segment_needs_matching_cache() {
        let m = mlp(vec![3, 4, 4, 1], 2);
        let segs = split_model(&m, &[1]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let (_, cache) = forward_segment_cached(&segs[0], &x).unwrap();
        let err = backward_segment(&segs[1], &cache, &Matrix::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, MlError::MissingCache { lo: 1, hi: 3 }));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut m = linear(1.0, 0.0);
        let g = GradientSet::from_flat(&m, &[2.0, 0.0], 1).unwrap();
        apply_update(&mut m, &g, 0.5).unwrap();
        assert_eq!(m.flatten_parameters(), vec![0.0, 0.0]);

        let before = m.clone();
        apply_update(&mut m, &GradientSet::zeros_like(&before, 1), 0.1).unwrap();
        assert_eq!(m, before);
        assert!(matches!(apply_update(&mut m, &g, 0.0), Err(MlError::InvalidLearningRate(_))));
    }

    #[test]
    fn pseudo_residual_conventions() {
        assert_eq!(compute_pseudo_residuals(&[0.0], &[1.0], LossKind::Mse).unwrap(), vec![1.0]);
        let same = [0.3, -2.0, 5.0];
        assert!(compute_pseudo_residuals(&same, &same, LossKind::Mse)
            .unwrap()
            .iter()
            .all(|&r| r == 0.0));
        assert!(compute_pseudo_residuals(&[0.0], &[1.0, 2.0], LossKind::Mse).is_err());
    }

    #[test]
    fn split_partitions() {
        let m = mlp(vec![2, 3, 3, 1], 0);
        let whole = split_model(&m, &[]).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!((whole[0].lo, whole[0].hi), (0, 3));

        let segs = split_model(&m, &[1]).unwrap();
        assert_eq!(
            segs.iter().map(|s| (s.lo, s.hi)).collect::<Vec<_>>(),
            vec![(0, 1), (1, 3)]
        );
        assert_eq!(reassemble(&segs).unwrap(), m);
    }

    #[test]
    fn u_shaped_cuts_match_boundaries() {
        let m = mlp(vec![4, 6, 5, 3, 1], 0);
        let segs = split_model(&m, &[1, 3]).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!((segs[0].in_width(), segs[0].out_width()), (4, 6));
        assert_eq!((segs[1].in_width(), segs[1].out_width()), (6, 3));
        assert_eq!((segs[2].in_width(), segs[2].out_width()), (3, 1));
        for pair in segs.windows(2) {
            assert_eq!(pair[0].out_width(), pair[1].in_width());
        }
    }

    #[test]
    fn invalid_cuts_rejected() {
        let m = mlp(vec![2, 3, 3, 1], 0);
        for cuts in [vec![0], vec![3], vec![2, 1], vec![1, 1]] {
            assert!(matches!(split_model(&m, &cuts), Err(MlError::InvalidCut(_))), "{cuts:?}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::mlp(vec![2, 0, 1], Activation::Relu, LossKind::Mse).validate().is_err());
        assert!(ModelSpec::mlp(vec![2, 3, 2], Activation::Relu, LossKind::Mse).validate().is_err());
        let mut lin = ModelSpec::linear(3, LossKind::Mse);
        lin.layer_widths = vec![3, 2, 1];
        lin.activations = vec![Activation::Identity];
        assert!(lin.validate().is_err());
    }

    #[test]
    fn range_load_round_trips() {
        let mut m = mlp(vec![2, 3, 3, 1], 5);
        let tail = m.flatten_range(1, 3).unwrap();
        let zeros = vec![0.0; tail.len()];
        m.load_range(1, 3, &zeros).unwrap();
        assert_eq!(m.flatten_range(1, 3).unwrap(), zeros);
        m.load_range(1, 3, &tail).unwrap();
        assert_eq!(m.flatten_range(1, 3).unwrap(), tail);
        assert!(m.flatten_range(0, 4).is_err());
    }
}

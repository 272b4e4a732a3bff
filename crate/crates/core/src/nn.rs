//! Fully connected classifiers (linear or ReLU, optional residual links) and
//! the softmax cross-entropy loss.
//!
//! Parameters live in one flat vector. Each layer owns a contiguous segment:
//! the row-major `fan_out x fan_in` weight matrix followed by its bias.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Example, LabeledDataset, SplitKind};
use crate::error::{Result, TicError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// First derivative. The ReLU derivative at exactly zero is taken as 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture of a fully connected classifier.
///
/// An empty `hidden_widths` describes plain softmax regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    #[serde(default)]
    pub skip_connections: bool,
}

/// Location of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSegment {
    pub layer_index: usize,
    pub weight_offset: usize,
    pub fan_out: usize,
    pub fan_in: usize,
    pub bias_offset: usize,
}

impl LayerSegment {
    pub fn weight_range(&self) -> Range<usize> {
        self.weight_offset..self.weight_offset + self.fan_out * self.fan_in
    }

    pub fn bias_range(&self) -> Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }

    /// Weights and bias together.
    pub fn range(&self) -> Range<usize> {
        self.weight_offset..self.bias_offset + self.fan_out
    }

    pub fn len(&self) -> usize {
        self.fan_out * self.fan_in + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        num_classes: usize,
        activation: Activation,
        skip_connections: bool,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            input_dim,
            hidden_widths,
            num_classes,
            activation,
            skip_connections,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(TicError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(TicError::InvalidSpec(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(TicError::InvalidSpec("hidden widths must be positive".into()));
        }
        if self.skip_connections {
            if let Some(&first) = self.hidden_widths.first() {
                if self.hidden_widths.iter().any(|&w| w != first) {
                    return Err(TicError::InvalidSpec(
                        "skip connections require equal hidden widths".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `(fan_in, fan_out)` of each layer in forward order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    pub fn layout(&self) -> Vec<LayerSegment> {
        let mut offset = 0;
        self.layer_dims()
            .into_iter()
            .enumerate()
            .map(|(layer_index, (fan_in, fan_out))| {
                let seg = LayerSegment {
                    layer_index,
                    weight_offset: offset,
                    fan_out,
                    fan_in,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += seg.len();
                seg
            })
            .collect()
    }

    /// Whether layer `layer` adds its input back onto its activated output.
    /// Only hidden layers after the first carry a residual link.
    pub fn has_residual(&self, layer: usize) -> bool {
        self.skip_connections && layer >= 1 && layer < self.hidden_widths.len()
    }

    pub fn is_hidden(&self, layer: usize) -> bool {
        layer < self.hidden_widths.len()
    }
}

/// Flat parameter vector with its per-layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerSegment>,
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.num_params()],
            layout: spec.layout(),
        }
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        let d = spec.num_params();
        if values.len() != d {
            return Err(TicError::DimensionMismatch {
                what: "parameter vector",
                expected: d,
                actual: values.len(),
            });
        }
        Ok(ParamVector {
            values,
            layout: spec.layout(),
        })
    }

    /// Seeded initialization: standard normal weights scaled by
    /// `sqrt(2 / fan_in)` for ReLU and `sqrt(1 / fan_in)` for identity,
    /// zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(spec);
        let gain = match spec.activation {
            Activation::Relu => 2.0,
            Activation::Identity => 1.0,
        };
        for seg in params.layout.clone() {
            let scale = (gain / seg.fan_in as f64).sqrt();
            for w in &mut params.values[seg.weight_range()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = z * scale;
            }
        }
        params
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[LayerSegment] {
        &self.layout
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.values[self.layout[layer].weight_range()]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[self.layout[layer].bias_range()]
    }

    pub(crate) fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let d = spec.num_params();
        if self.values.len() != d || self.layout != spec.layout() {
            return Err(TicError::DimensionMismatch {
                what: "parameter vector",
                expected: d,
                actual: self.values.len(),
            });
        }
        Ok(())
    }
}

/// `out = W x + b` for a row-major `W`.
#[inline]
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let fan_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(r, &bias)| {
        let row = &w[r * fan_in..(r + 1) * fan_in];
        bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// Input of every layer; `inputs[0]` is x.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer; the last entry holds the logits.
    pub pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

pub(crate) fn check_input(spec: &NetworkSpec, params: &ParamVector, x: &[f64]) -> Result<()> {
    params.check(spec)?;
    if x.len() != spec.input_dim {
        return Err(TicError::DimensionMismatch {
            what: "input vector",
            expected: spec.input_dim,
            actual: x.len(),
        });
    }
    Ok(())
}

/// Forward pass without input validation.
pub(crate) fn forward_cached(spec: &NetworkSpec, params: &ParamVector, x: &[f64]) -> ForwardCache {
    let layers = spec.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    let mut h = x.to_vec();
    for l in 0..layers {
        let mut z = Vec::new();
        affine(params.weights(l), params.bias(l), &h, &mut z);
        if spec.is_hidden(l) {
            let mut next: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
            if spec.has_residual(l) {
                for (n, &prev) in next.iter_mut().zip(&h) {
                    *n += prev;
                }
            }
            inputs.push(std::mem::replace(&mut h, next));
        } else {
            inputs.push(std::mem::take(&mut h));
        }
        pre.push(z);
    }
    ForwardCache { inputs, pre }
}

/// Pre-softmax logits of the network at `x`.
pub fn forward(spec: &NetworkSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_input(spec, params, x)?;
    let mut cache = forward_cached(spec, params, x);
    Ok(cache.pre.pop().expect("at least one layer"))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy `-log softmax(logits)[label]`.
pub fn loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(TicError::LabelOutOfRange {
            label,
            num_classes: logits.len(),
        });
    }
    // Clamp tiny negative rounding when the label dominates.
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Mean loss over a batch, summed in the batch's order.
pub fn batch_mean_loss(spec: &NetworkSpec, params: &ParamVector, batch: &[Example<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(TicError::Empty("batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        let logits = forward(spec, params, ex.x)?;
        total += loss(&logits, ex.label)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss over one split of `dataset`.
pub fn mean_loss(
    spec: &NetworkSpec,
    params: &ParamVector,
    dataset: &LabeledDataset,
    split: SplitKind,
) -> Result<f64> {
    let batch = dataset.examples(split);
    if batch.is_empty() {
        return Err(TicError::Empty("dataset split"));
    }
    batch_mean_loss(spec, params, &batch)
}

/// Fraction of examples in `split` whose arg-max logit matches the label.
pub fn accuracy(
    spec: &NetworkSpec,
    params: &ParamVector,
    dataset: &LabeledDataset,
    split: SplitKind,
) -> Result<f64> {
    let batch = dataset.examples(split);
    if batch.is_empty() {
        return Err(TicError::Empty("dataset split"));
    }
    let mut correct = 0usize;
    for ex in &batch {
        let logits = forward(spec, params, ex.x)?;
        let argmax = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
            .0;
        if argmax == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

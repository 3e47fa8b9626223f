//! Dense ReLU classifiers with hand-derived backpropagation.
//!
//! A [`Network`] is a stack of [`DenseLayer`]s. Every layer but the last is
//! followed by a ReLU; the last layer emits pre-softmax logits. Weights are
//! stored row-major with shape `(out_dim, in_dim)`.
//!
//! The flat parameter vector used by the optimizer ([`ParamVector`]) lists,
//! for each layer in order, the weight matrix (row-major) followed by the
//! bias vector.
//!
//! ReLU subgradients at zero are taken as zero. Argmax ties resolve to the
//! lowest index.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points per work unit when reducing over a dataset. The reduction order is
/// fixed by this constant, not by the thread count.
const REDUCE_CHUNK: usize = 256;

/// Layer widths from input to logits, e.g. `[784, 32, 10]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Architecture {
    dims: Vec<usize>,
}

impl Architecture {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(
                "architecture needs at least an input and an output width".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn layout(&self) -> ParamLayout {
        let mut layers = Vec::with_capacity(self.num_layers());
        let mut cursor = 0;
        for pair in self.dims.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let weight_start = cursor;
            let bias_start = weight_start + in_dim * out_dim;
            cursor = bias_start + out_dim;
            layers.push(LayerOffset {
                weight_start,
                bias_start,
                in_dim,
                out_dim,
            });
        }
        ParamLayout {
            layers,
            len: cursor,
        }
    }
}

/// Position of one layer's parameters inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffset {
    pub weight_start: usize,
    pub bias_start: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerOffset {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_start..self.bias_start
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_start..self.bias_start + self.out_dim
    }
}

/// Index map from layers to flat parameter positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    layers: Vec<LayerOffset>,
    len: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layers(&self) -> &[LayerOffset] {
        &self.layers
    }

    /// Flat indices of every bias parameter.
    pub fn bias_indices(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| l.bias_range()).collect()
    }

    /// Flat indices of the weights, grouped per layer.
    pub fn weight_groups(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| l.weight_range().collect())
            .collect()
    }
}

/// A point in parameter space together with the layout that gives it meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<ParamLayout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(layout.len(), values.len()));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
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

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.values, other)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::shape(self.values.len(), other.values.len()));
        }
        if *self.layout != *other.layout {
            return Err(Error::Domain(
                "parameter vectors have different layer layouts".into(),
            ));
        }
        Ok(())
    }
}

/// Convex combination `alpha * wk + (1 - alpha) * w0`.
pub fn blend(w0: &ParamVector, wk: &ParamVector, alpha: f64) -> Result<ParamVector> {
    w0.check_compatible(wk)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "blend weight {alpha} outside [0, 1]"
        )));
    }
    let values = w0
        .values
        .iter()
        .zip(&wk.values)
        .map(|(&a, &b)| alpha * b + (1.0 - alpha) * a)
        .collect();
    Ok(ParamVector {
        values,
        layout: Arc::clone(&w0.layout),
    })
}

/// One affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::shape(in_dim * out_dim, weights.len()));
        }
        if biases.len() != out_dim {
            return Err(Error::shape(out_dim, biases.len()));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Domain("layer parameters must be finite".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            biases,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Row-major `(out_dim, in_dim)` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.out_dim).map(|r| self.biases[r] + dot(self.row(r), x)));
    }
}

/// Labeled inputs stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    input_dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(
        input_dim: usize,
        num_classes: usize,
        rows: impl IntoIterator<Item = (Vec<f64>, usize)>,
    ) -> Result<Self> {
        let mut data = Self::new(input_dim, num_classes);
        for (x, y) in rows {
            data.push(&x, y)?;
        }
        Ok(data)
    }

    /// Builds a dataset from an already flattened feature buffer.
    pub fn from_flat(
        input_dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 || features.len() != labels.len() * input_dim {
            return Err(Error::shape(labels.len() * input_dim, features.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            input_dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn push(&mut self, x: &[f64], y: usize) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::shape(self.input_dim, x.len()));
        }
        if y >= self.num_classes {
            return Err(Error::Domain(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        self.features.extend_from_slice(x);
        self.labels.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&[f64], usize)> + '_ {
        self.features
            .chunks_exact(self.input_dim)
            .zip(self.labels.iter().copied())
    }

    /// The first `n` points (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            features: self.features[..n * self.input_dim].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Appends all points of `other`.
    pub fn extend_from(&mut self, other: &LabeledDataset) -> Result<()> {
        if other.input_dim != self.input_dim {
            return Err(Error::shape(self.input_dim, other.input_dim));
        }
        if other.num_classes != self.num_classes {
            return Err(Error::Domain("datasets disagree on class count".into()));
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }
}

/// Intermediate activations of one forward pass. `acts[0]` is the input,
/// `acts[l + 1]` the output of layer `l` (post-ReLU for hidden layers,
/// logits for the last).
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input")
    }
}

/// Feedforward ReLU classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
    layout: Arc<ParamLayout>,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "layer widths do not chain: {} outputs feed {} inputs",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        let arch = Architecture::new(
            std::iter::once(layers[0].in_dim)
                .chain(layers.iter().map(|l| l.out_dim))
                .collect(),
        )?;
        Ok(Self {
            layers,
            layout: Arc::new(arch.layout()),
        })
    }

    /// All-zero parameters for `arch`.
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .dims()
            .windows(2)
            .map(|p| DenseLayer::zeros(p[0], p[1]))
            .collect();
        Self {
            layers,
            layout: Arc::new(arch.layout()),
        }
    }

    /// Rebuilds a network of architecture `arch` from a flat vector.
    pub fn from_params(arch: &Architecture, params: &ParamVector) -> Result<Self> {
        let mut net = Self::zeros(arch);
        net.set_params(params)?;
        Ok(net)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            dims: std::iter::once(self.input_dim())
                .chain(self.layers.iter().map(|l| l.out_dim))
                .collect(),
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn to_params(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.layout.len());
        for layer in &self.layers {
            values.extend_from_slice(&layer.weights);
            values.extend_from_slice(&layer.biases);
        }
        ParamVector {
            values,
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        self.set_param_values(params.values())?;
        Ok(())
    }

    /// Overwrites every parameter from a flat slice in layout order.
    pub fn set_param_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.layout.len() {
            return Err(Error::shape(self.layout.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter value".into()));
        }
        for (layer, off) in self.layers.iter_mut().zip(self.layout.layers()) {
            layer.weights.copy_from_slice(&values[off.weight_range()]);
            layer.biases.copy_from_slice(&values[off.bias_range()]);
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), x.len()));
        }
        Ok(())
    }

    fn check_label(&self, i: usize) -> Result<()> {
        if i >= self.num_classes() {
            return Err(Error::Domain(format!(
                "label {i} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn check_dataset(&self, data: &LabeledDataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Domain("dataset is empty".into()));
        }
        if data.input_dim() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), data.input_dim()));
        }
        if data.num_classes() != self.num_classes() {
            return Err(Error::Domain(format!(
                "dataset has {} classes, network has {}",
                data.num_classes(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.affine_into(&acts[l], &mut out);
            if l < last {
                relu_in_place(&mut out);
            }
            acts.push(out);
        }
        Trace { acts }
    }

    fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine_into(&cur, &mut next);
            if l < last {
                relu_in_place(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Pre-softmax logits for input `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.logits_unchecked(x))
    }

    /// Index of the largest logit.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Mean softmax cross-entropy over `data`.
    pub fn loss(&self, data: &LabeledDataset) -> Result<f64> {
        self.check_dataset(data)?;
        let partials: Vec<f64> = chunk_ranges(data.len())
            .into_par_iter()
            .map(|range| {
                range
                    .map(|n| cross_entropy(&self.logits_unchecked(data.input(n)), data.label(n)).0)
                    .sum::<f64>()
            })
            .collect();
        Ok(partials.iter().sum::<f64>() / data.len() as f64)
    }

    /// Gradient of [`Network::loss`] with respect to every parameter.
    pub fn grad_loss_params(&self, data: &LabeledDataset) -> Result<ParamVector> {
        self.check_dataset(data)?;
        let (_, grad) = self.loss_and_grad_over(data, 0..data.len());
        Ok(ParamVector {
            values: grad,
            layout: Arc::clone(&self.layout),
        })
    }

    /// Mean loss and its parameter gradient over `data`, in one pass.
    pub fn loss_and_grad(&self, data: &LabeledDataset) -> Result<(f64, ParamVector)> {
        self.check_dataset(data)?;
        let (loss, grad) = self.loss_and_grad_over(data, 0..data.len());
        Ok((
            loss,
            ParamVector {
                values: grad,
                layout: Arc::clone(&self.layout),
            },
        ))
    }

    /// Mean loss and gradient over the points listed in `indices`.
    pub(crate) fn loss_and_grad_indices(
        &self,
        data: &LabeledDataset,
        indices: &[usize],
    ) -> (f64, Vec<f64>) {
        let partials: Vec<(f64, Vec<f64>)> = indices
            .par_chunks(REDUCE_CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; self.layout.len()];
                let mut loss = 0.0;
                for &n in chunk {
                    loss += self.accumulate_point(data.input(n), data.label(n), &mut grad);
                }
                (loss, grad)
            })
            .collect();
        finish_mean(partials, self.layout.len(), indices.len())
    }

    fn loss_and_grad_over(
        &self,
        data: &LabeledDataset,
        range: std::ops::Range<usize>,
    ) -> (f64, Vec<f64>) {
        let count = range.len();
        let partials: Vec<(f64, Vec<f64>)> = chunk_ranges_in(range)
            .into_par_iter()
            .map(|chunk| {
                let mut grad = vec![0.0; self.layout.len()];
                let mut loss = 0.0;
                for n in chunk {
                    loss += self.accumulate_point(data.input(n), data.label(n), &mut grad);
                }
                (loss, grad)
            })
            .collect();
        finish_mean(partials, self.layout.len(), count)
    }

    /// Adds the cross-entropy gradient of one point into `grad`; returns its loss.
    fn accumulate_point(&self, x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let trace = self.trace(x);
        let (loss, dlogits) = cross_entropy(trace.logits(), y);
        self.backward(&trace, dlogits, Some(grad), false);
        loss
    }

    /// Gradient of logit `i` with respect to every parameter.
    pub fn grad_output_params(&self, x: &[f64], i: usize) -> Result<ParamVector> {
        self.check_input(x)?;
        self.check_label(i)?;
        let mut seed = vec![0.0; self.num_classes()];
        seed[i] = 1.0;
        let (params, _, _) = self.seeded_gradients(x, &seed, true, false);
        Ok(ParamVector {
            values: params.expect("requested"),
            layout: Arc::clone(&self.layout),
        })
    }

    /// Gradient of logit `i` with respect to the input.
    pub fn grad_output_input(&self, x: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_label(i)?;
        let mut seed = vec![0.0; self.num_classes()];
        seed[i] = 1.0;
        let (_, input, _) = self.seeded_gradients(x, &seed, false, true);
        Ok(input.expect("requested"))
    }

    /// Gradient of the single-point cross-entropy with respect to the input.
    pub fn grad_loss_input(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_label(y)?;
        let trace = self.trace(x);
        let (_, dlogits) = cross_entropy(trace.logits(), y);
        Ok(self
            .backward(&trace, dlogits, None, true)
            .expect("requested"))
    }

    /// Gradients of `seedᵀ f(x; w)` with respect to parameters and input,
    /// plus the logits at `x`. `seed` has one entry per class.
    pub fn directional_gradients(
        &self,
        x: &[f64],
        seed: &[f64],
    ) -> Result<(ParamVector, Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        if seed.len() != self.num_classes() {
            return Err(Error::shape(self.num_classes(), seed.len()));
        }
        let (params, input, logits) = self.seeded_gradients(x, seed, true, true);
        Ok((
            ParamVector {
                values: params.expect("requested"),
                layout: Arc::clone(&self.layout),
            },
            input.expect("requested"),
            logits,
        ))
    }

    fn seeded_gradients(
        &self,
        x: &[f64],
        seed: &[f64],
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
        let trace = self.trace(x);
        let mut params = want_params.then(|| vec![0.0; self.layout.len()]);
        let input = self.backward(&trace, seed.to_vec(), params.as_deref_mut(), want_input);
        let logits = trace.logits().to_vec();
        (params, input, logits)
    }

    /// Backpropagates `delta` (d/d logits) through the trace. Parameter
    /// gradients are added into `param_grad`; the input gradient is returned
    /// when requested.
    fn backward(
        &self,
        trace: &Trace,
        mut delta: Vec<f64>,
        mut param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a_in = &trace.acts[l];
            if let Some(grad) = param_grad.as_deref_mut() {
                let off = self.layout.layers()[l];
                for (r, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    grad[off.bias_start + r] += d;
                    let start = off.weight_start + r * layer.in_dim;
                    for (g, &a) in grad[start..start + layer.in_dim].iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(layer.row(r)) {
                    *p += w * d;
                }
            }
            if l > 0 {
                // acts[l] is the post-ReLU output of layer l - 1.
                for (p, &a) in prev.iter_mut().zip(a_in) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Some(delta)
    }
}

/// Index of the maximal entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy of `logits` against label `y`, and its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = max + sum.ln() - logits[y];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[y] -= 1.0;
    (loss, grad)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    chunk_ranges_in(0..n)
}

fn chunk_ranges_in(range: std::ops::Range<usize>) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = range.start;
    while start < range.end {
        let end = (start + REDUCE_CHUNK).min(range.end);
        out.push(start..end);
        start = end;
    }
    out
}

fn finish_mean(partials: Vec<(f64, Vec<f64>)>, dim: usize, count: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for (l, g) in partials {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let scale = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

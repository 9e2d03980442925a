//! Fully connected ReLU networks over a flat parameter vector.
//!
//! Layout of the flat vector: every trunk layer in order, then every head in
//! order. Each layer stores its weight matrix row-major as `[fan_out][fan_in]`
//! followed by its `fan_out` biases. Heads are linear; link functions live in
//! [`crate::likelihood`].
//!
//! All gradient routines share one batched backward pass that hands each
//! layer's output deltas and input activations to a sink, so the summed
//! gradient, per-example gradients and weighted per-example squared gradients
//! all cost a single sweep.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood;

/// Shape of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_range(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn param_count(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

/// ReLU MLP with a shared trunk and one or more linear heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchSpec", into = "ArchSpec")]
pub struct MlpArch {
    input_dim: usize,
    hidden: Vec<usize>,
    heads: Vec<usize>,
    trunk: Vec<LayerSpec>,
    head_layers: Vec<LayerSpec>,
    param_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ArchSpec {
    input_dim: usize,
    hidden: Vec<usize>,
    heads: Vec<usize>,
}

impl TryFrom<ArchSpec> for MlpArch {
    type Error = Error;

    fn try_from(spec: ArchSpec) -> Result<Self> {
        MlpArch::new(spec.input_dim, spec.hidden, spec.heads)
    }
}

impl From<MlpArch> for ArchSpec {
    fn from(arch: MlpArch) -> Self {
        ArchSpec {
            input_dim: arch.input_dim,
            hidden: arch.hidden,
            heads: arch.heads,
        }
    }
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, heads: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("arch.input_dim", "must be at least 1"));
        }
        if let Some(i) = hidden.iter().position(|&h| h == 0) {
            return Err(Error::config(format!("arch.hidden[{i}]"), "must be at least 1"));
        }
        if heads.is_empty() {
            return Err(Error::config("arch.heads", "need at least one head"));
        }
        if let Some(i) = heads.iter().position(|&h| h == 0) {
            return Err(Error::config(format!("arch.heads[{i}]"), "must be at least 1"));
        }
        let mut offset = 0;
        let mut fan_in = input_dim;
        let mut trunk = Vec::with_capacity(hidden.len());
        for &fan_out in &hidden {
            let layer = LayerSpec {
                fan_in,
                fan_out,
                offset,
            };
            offset += layer.param_count();
            trunk.push(layer);
            fan_in = fan_out;
        }
        let mut head_layers = Vec::with_capacity(heads.len());
        for &fan_out in &heads {
            let layer = LayerSpec {
                fan_in,
                fan_out,
                offset,
            };
            offset += layer.param_count();
            head_layers.push(layer);
        }
        Ok(Self {
            input_dim,
            hidden,
            heads,
            trunk,
            head_layers,
            param_count: offset,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn head_width(&self, head: usize) -> Result<usize> {
        self.heads.get(head).copied().ok_or(Error::DimensionMismatch {
            context: "head index out of range",
            expected: self.heads.len(),
            got: head,
        })
    }

    /// Total parameter count P.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn trunk_layers(&self) -> &[LayerSpec] {
        &self.trunk
    }

    pub fn head_layer(&self, head: usize) -> Result<LayerSpec> {
        self.head_width(head)?;
        Ok(self.head_layers[head])
    }

    /// Indices of the flat vector owned by `head`.
    pub fn head_param_range(&self, head: usize) -> Result<Range<usize>> {
        let layer = self.head_layer(head)?;
        Ok(layer.offset..layer.offset + layer.param_count())
    }

    /// Trunk layers followed by the addressed head.
    fn path(&self, head: usize) -> Result<Vec<LayerSpec>> {
        let mut layers = self.trunk.clone();
        layers.push(self.head_layer(head)?);
        Ok(layers)
    }

    fn check_weights(&self, w: &FlatWeights) -> Result<()> {
        if w.len() != self.param_count {
            return Err(Error::DimensionMismatch {
                context: "weight vector length",
                expected: self.param_count,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "input dimension",
                expected: self.input_dim,
                got: inputs.ncols(),
            });
        }
        Ok(())
    }
}

/// Full network parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWeights(Vec<f64>);

impl FlatWeights {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn weight_view(&self, layer: &LayerSpec) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((layer.fan_out, layer.fan_in), &self.0[layer.weight_range()])
            .expect("layer spec matches flat layout")
    }

    fn bias_view(&self, layer: &LayerSpec) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[layer.bias_range()])
    }
}

/// He-normal weights (std √(2/fan_in)) and zero biases, seeded.
pub fn init_weights(arch: &MlpArch, seed: u64) -> FlatWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = FlatWeights::zeros(arch.param_count());
    for layer in arch.trunk.iter().chain(&arch.head_layers) {
        let std = (2.0 / layer.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in &mut w.0[layer.weight_range()] {
            *v = normal.sample(&mut rng);
        }
    }
    w
}

/// Activations of every layer for a batch: `acts[0]` is the input, then each
/// hidden layer's post-ReLU output.
struct ForwardCache<'a> {
    input: ArrayView2<'a, f64>,
    hidden: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ForwardCache<'_> {
    fn layer_input(&self, idx: usize) -> ArrayView2<'_, f64> {
        if idx == 0 {
            self.input.view()
        } else {
            self.hidden[idx - 1].view()
        }
    }
}

fn affine(a: &ArrayView2<'_, f64>, w: &FlatWeights, layer: &LayerSpec) -> Array2<f64> {
    let mut z = a.dot(&w.weight_view(layer).t());
    // dot may pick column-major output when both operands look column-major
    // (e.g. a single input feature); callers rely on contiguous rows.
    if !z.is_standard_layout() {
        z = z.as_standard_layout().into_owned();
    }
    z += &w.bias_view(layer);
    z
}

fn forward_cached<'a>(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'a, f64>,
    head: usize,
) -> Result<ForwardCache<'a>> {
    arch.check_weights(w)?;
    arch.check_inputs(&inputs)?;
    let head_layer = arch.head_layer(head)?;
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(arch.trunk.len());
    for layer in &arch.trunk {
        let a = hidden.last().map_or(inputs.view(), |h| h.view());
        let mut z = affine(&a, w, layer);
        z.mapv_inplace(|v| v.max(0.0));
        hidden.push(z);
    }
    let last = hidden.last().map_or(inputs.view(), |h| h.view());
    let logits = affine(&last, w, &head_layer);
    Ok(ForwardCache {
        input: inputs,
        hidden,
        logits,
    })
}

/// Logits of `head` for every row of `inputs` (B×K).
pub fn forward_batch(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    head: usize,
) -> Result<Array2<f64>> {
    Ok(forward_cached(arch, w, inputs, head)?.logits)
}

/// Logits of `head` for a single input.
pub fn forward(arch: &MlpArch, w: &FlatWeights, x: &[f64], head: usize) -> Result<Vec<f64>> {
    let inputs = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(forward_batch(arch, w, inputs, head)?.row(0).to_vec())
}

/// Backpropagates per-example output seeds (B×K) through `head` and the trunk.
/// `sink` receives each layer (head first), its B×fan_out deltas and its
/// B×fan_in input activations. ReLU's derivative at 0 is taken as 0.
fn backprop<F>(
    arch: &MlpArch,
    w: &FlatWeights,
    cache: &ForwardCache<'_>,
    seeds: ArrayView2<'_, f64>,
    head: usize,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(&LayerSpec, &Array2<f64>, ArrayView2<'_, f64>),
{
    let layers = arch.path(head)?;
    if seeds.dim() != cache.logits.dim() {
        return Err(Error::DimensionMismatch {
            context: "output seeds shape",
            expected: cache.logits.len(),
            got: seeds.len(),
        });
    }
    let mut delta = seeds.to_owned();
    for idx in (0..layers.len()).rev() {
        let layer = &layers[idx];
        let a_in = cache.layer_input(idx);
        sink(layer, &delta, a_in.view());
        if idx > 0 {
            let mut next = delta.dot(&w.weight_view(layer));
            next.zip_mut_with(&a_in, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            delta = next;
        }
    }
    Ok(())
}

fn seeded_gradient(
    arch: &MlpArch,
    w: &FlatWeights,
    cache: &ForwardCache<'_>,
    seeds: ArrayView2<'_, f64>,
    head: usize,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; arch.param_count()];
    backprop(arch, w, cache, seeds, head, |layer, delta, a_in| {
        let dw = delta.t().dot(&a_in);
        for (g, v) in grad[layer.weight_range()].iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in grad[layer.bias_range()].iter_mut().zip(delta.sum_axis(Axis(0))) {
            *g += v;
        }
    })?;
    Ok(grad)
}

/// `Σ_i seeds_iᵀ J(x_i)`: a vector-Jacobian product summed over the batch.
pub fn vjp_batch(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    seeds: ArrayView2<'_, f64>,
    head: usize,
) -> Result<Vec<f64>> {
    let cache = forward_cached(arch, w, inputs, head)?;
    seeded_gradient(arch, w, &cache, seeds, head)
}

/// Like [`vjp_batch`], but the seeds are computed from the logits of the same
/// forward pass. The closure may also return a side value.
pub fn vjp_from_logits<T, F>(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    head: usize,
    seeds_for: F,
) -> Result<(Vec<f64>, T)>
where
    F: FnOnce(&Array2<f64>) -> Result<(Array2<f64>, T)>,
{
    let cache = forward_cached(arch, w, inputs, head)?;
    let (seeds, extra) = seeds_for(&cache.logits)?;
    Ok((seeded_gradient(arch, w, &cache, seeds.view(), head)?, extra))
}

fn check_labels(inputs: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != inputs.nrows() {
        return Err(Error::DimensionMismatch {
            context: "labels per input",
            expected: inputs.nrows(),
            got: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

fn loss_seeds(logits: &Array2<f64>, labels: &[usize]) -> Result<(Array2<f64>, f64)> {
    let mut seeds = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut seed), &y) in logits.outer_iter().zip(seeds.outer_iter_mut()).zip(labels) {
        let f = row.to_vec();
        total += likelihood::loss(y, &f)?;
        for (s, d) in seed.iter_mut().zip(likelihood::loss_derivative(y, &f)?) {
            *s = d;
        }
    }
    Ok((seeds, total))
}

/// Summed (not averaged) cross-entropy over the batch.
pub fn summed_loss(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    head: usize,
) -> Result<f64> {
    check_labels(&inputs, labels)?;
    let logits = forward_batch(arch, w, inputs, head)?;
    let mut total = 0.0;
    for (row, &y) in logits.outer_iter().zip(labels) {
        total += likelihood::loss(y, row.as_slice().expect("contiguous row"))?;
    }
    Ok(total)
}

/// Gradient of the summed cross-entropy over the batch, plus the loss value.
pub fn loss_and_grad(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    head: usize,
) -> Result<(f64, Vec<f64>)> {
    check_labels(&inputs, labels)?;
    let cache = forward_cached(arch, w, inputs, head)?;
    let (seeds, loss) = loss_seeds(&cache.logits, labels)?;
    let grad = seeded_gradient(arch, w, &cache, seeds.view(), head)?;
    Ok((loss, grad))
}

/// Gradient of the summed cross-entropy over the batch.
pub fn loss_grad(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    head: usize,
) -> Result<Vec<f64>> {
    Ok(loss_and_grad(arch, w, inputs, labels, head)?.1)
}

/// Row `i` is `seeds_iᵀ J(x_i)`, materialized over the full parameter vector.
pub fn per_example_vjp(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    seeds: ArrayView2<'_, f64>,
    head: usize,
) -> Result<Array2<f64>> {
    let cache = forward_cached(arch, w, inputs, head)?;
    let batch = inputs.nrows();
    let mut out = Array2::zeros((batch, arch.param_count()));
    backprop(arch, w, &cache, seeds, head, |layer, delta, a_in| {
        for i in 0..batch {
            let mut row = out.row_mut(i);
            let d = delta.row(i);
            let a = a_in.row(i);
            let mut wblock = row.slice_mut(s![layer.weight_range()]);
            let mut wblock = wblock
                .view_mut()
                .into_shape_with_order((layer.fan_out, layer.fan_in))
                .expect("weight block shape");
            for (o, mut r) in wblock.outer_iter_mut().enumerate() {
                let dv = d[o];
                if dv != 0.0 {
                    r.scaled_add(dv, &a);
                }
            }
            row.slice_mut(s![layer.bias_range()]).assign(&d);
        }
    })?;
    Ok(out)
}

/// Accumulates `Σ_i weights_i · (seeds_iᵀ J(x_i))²` (elementwise square) into `acc`.
pub fn accumulate_weighted_sq_vjp(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    seeds: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    head: usize,
    acc: &mut [f64],
) -> Result<()> {
    if acc.len() != arch.param_count() {
        return Err(Error::DimensionMismatch {
            context: "accumulator length",
            expected: arch.param_count(),
            got: acc.len(),
        });
    }
    if weights.len() != inputs.nrows() {
        return Err(Error::DimensionMismatch {
            context: "per-example weights",
            expected: inputs.nrows(),
            got: weights.len(),
        });
    }
    let cache = forward_cached(arch, w, inputs, head)?;
    let weights = weights.insert_axis(Axis(1));
    backprop(arch, w, &cache, seeds, head, |layer, delta, a_in| {
        // Per-example weight gradient is δ_i a_iᵀ, so its square is δ_i² (a_i²)ᵀ.
        let wd2 = delta.mapv(|d| d * d) * &weights;
        let a2 = a_in.mapv(|a| a * a);
        let dw = wd2.t().dot(&a2);
        for (g, v) in acc[layer.weight_range()].iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in acc[layer.bias_range()].iter_mut().zip(wd2.sum_axis(Axis(0))) {
            *g += v;
        }
    })
}

/// Jacobian of the `head` logits at `x` (K×P). Columns outside the trunk and
/// the addressed head are exactly zero.
pub fn output_jacobian(
    arch: &MlpArch,
    w: &FlatWeights,
    x: &[f64],
    head: usize,
) -> Result<Array2<f64>> {
    let k = arch.head_width(head)?;
    if x.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "input dimension",
            expected: arch.input_dim(),
            got: x.len(),
        });
    }
    let row = ArrayView1::from(x);
    let inputs = row.broadcast((k, x.len())).expect("broadcast input").to_owned();
    let seeds = Array2::eye(k);
    per_example_vjp(arch, w, inputs.view(), seeds.view(), head)
}

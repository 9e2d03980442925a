//! Function-space view of the weight posterior at memorable inputs.
//!
//! With a diagonal posterior variance `v`, the predictive mean at `x` is the
//! link of the network output and the kernel between two inputs is
//! `Λ(x_i)^{(k)} J(x_i) Diag(v) J(x_j)ᵀ Λ(x_j)^{(k)ᵀ}`, one GP per class `k`.
//! For a sigmoid head this reduces to `λ_i J_i Diag(v) J_jᵀ λ_j`.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::likelihood::{self, NoisePrecision};
use crate::numerics::{spd_factor, DenseMatrix, SpdFactor};
use crate::network::{self, FlatWeights, MlpArch};

/// Relative diagonal jitter applied before factoring a kernel block.
pub const KERNEL_JITTER: f64 = 1e-6;
/// Absolute floor for the jitter when the kernel diagonal vanishes.
const KERNEL_JITTER_FLOOR: f64 = 1e-12;

/// Predictive means per class: column `k` holds class `k` for every input
/// (a single column for a sigmoid head).
pub fn predictive_mean(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    head: usize,
) -> Result<Array2<f64>> {
    if inputs.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut logits = network::forward_batch(arch, w, inputs, head)?;
    for mut row in logits.outer_iter_mut() {
        let p = likelihood::link(row.as_slice().expect("contiguous row"));
        row.assign(&Array1::from(p));
    }
    Ok(logits)
}

/// Per-input output seeds `Λ_i^{(k)}` (row `k` of the noise precision).
fn hessian_rows(logits: &Array2<f64>, class: usize) -> Result<Array2<f64>> {
    let width = logits.ncols();
    let class_limit = if width == 1 { 1 } else { width };
    if class >= class_limit {
        return Err(Error::DimensionMismatch {
            context: "class index for kernel",
            expected: class_limit,
            got: class,
        });
    }
    let mut seeds = Array2::zeros(logits.raw_dim());
    for (row, mut seed) in logits.outer_iter().zip(seeds.outer_iter_mut()) {
        let lam = likelihood::noise_precision(row.as_slice().expect("contiguous"));
        let r = match &lam {
            NoisePrecision::Scalar(l) => vec![*l],
            NoisePrecision::Matrix(_) => lam.row(class),
        };
        seed.assign(&Array1::from(r));
    }
    Ok(seeds)
}

/// Rows `∇_w m_k(x_i) = Λ_i^{(k)} J_i` for every input, M×P.
pub fn mean_gradients(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    head: usize,
    class: usize,
) -> Result<Array2<f64>> {
    let logits = network::forward_batch(arch, w, inputs, head)?;
    let seeds = hessian_rows(&logits, class)?;
    network::per_example_vjp(arch, w, inputs, seeds.view(), head)
}

/// M×M kernel for class `class` under variance `variance`.
pub fn kernel_matrix(
    arch: &MlpArch,
    w: &FlatWeights,
    variance: &[f64],
    inputs: ArrayView2<'_, f64>,
    head: usize,
    class: usize,
) -> Result<DenseMatrix> {
    if variance.len() != arch.param_count() {
        return Err(Error::DimensionMismatch {
            context: "variance length",
            expected: arch.param_count(),
            got: variance.len(),
        });
    }
    if variance.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::NonFinite("variance must be non-negative"));
    }
    let mut g = mean_gradients(arch, w, inputs, head, class)?;
    let root: Array1<f64> = variance.iter().map(|v| v.sqrt()).collect();
    g *= &root.insert_axis(Axis(0));
    let k = g.dot(&g.t());
    let kt = k.t().to_owned();
    Ok((k + kt) * 0.5)
}

fn factor_kernel(kernel: &DenseMatrix) -> Result<SpdFactor> {
    let n = kernel.nrows().max(1) as f64;
    let mean_diag = kernel.diag().sum() / n;
    spd_factor(kernel.view(), (KERNEL_JITTER * mean_diag).max(KERNEL_JITTER_FLOOR))
}

/// Frozen functional prior for one past task: means and factored kernels per
/// class, all at the memorable inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSnapshot {
    pub task: usize,
    pub head: usize,
    /// Class indices (columns of the head's link output) regularised for this task.
    pub classes: Vec<usize>,
    pub inputs: Array2<f64>,
    /// `means[c][i]`: predictive mean of `classes[c]` at input `i`.
    pub means: Vec<Array1<f64>>,
    pub factors: Vec<SpdFactor>,
}

impl TaskSnapshot {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Independent per-task blocks; no cross-task kernel is kept.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FunctionalSnapshot {
    pub blocks: Vec<TaskSnapshot>,
}

/// Memorable inputs of one task plus where and what to regularise.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotRequest<'a> {
    pub task: usize,
    pub head: usize,
    pub inputs: ArrayView2<'a, f64>,
    pub classes: &'a [usize],
}

/// Classes of a head: `[0]` for a sigmoid head, else the given subset.
fn validate_classes(arch: &MlpArch, head: usize, classes: &[usize]) -> Result<()> {
    let width = arch.head_width(head)?;
    let limit = if width == 1 { 1 } else { width };
    if classes.is_empty() {
        return Err(Error::config("classes", "need at least one class to regularise"));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= limit) {
        return Err(Error::DimensionMismatch {
            context: "class index for head",
            expected: limit,
            got: c,
        });
    }
    Ok(())
}

pub fn snapshot_task(
    arch: &MlpArch,
    w: &FlatWeights,
    variance: &[f64],
    req: SnapshotRequest<'_>,
) -> Result<TaskSnapshot> {
    if req.inputs.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    validate_classes(arch, req.head, req.classes)?;
    let probs = predictive_mean(arch, w, req.inputs, req.head)?;
    let mut means = Vec::with_capacity(req.classes.len());
    let mut factors = Vec::with_capacity(req.classes.len());
    for &class in req.classes {
        means.push(probs.column(class).to_owned());
        let kernel = kernel_matrix(arch, w, variance, req.inputs, req.head, class)?;
        factors.push(factor_kernel(&kernel)?);
    }
    Ok(TaskSnapshot {
        task: req.task,
        head: req.head,
        classes: req.classes.to_vec(),
        inputs: req.inputs.to_owned(),
        means,
        factors,
    })
}

/// Evaluates means and factored kernels for each requested task at `(w, v)`.
pub fn take_snapshot(
    arch: &MlpArch,
    w: &FlatWeights,
    variance: &[f64],
    requests: &[SnapshotRequest<'_>],
) -> Result<FunctionalSnapshot> {
    let blocks = requests
        .iter()
        .map(|req| snapshot_task(arch, w, variance, *req))
        .collect::<Result<Vec<_>>>()?;
    Ok(FunctionalSnapshot { blocks })
}

//! The continual-learning loop: Adam on the summed task loss plus a
//! τ-weighted functional regulariser over every past memorable set.
//!
//! After each task the diagonal posterior is refreshed at the trained
//! weights, the task's memorable inputs are chosen, and a frozen functional
//! prior (means and factored kernels at those inputs) is appended to the
//! bank. The four method variants differ only in how memory is chosen and
//! whether the kernel is replaced by the identity.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::gp::{self, SnapshotRequest, TaskSnapshot};
use crate::likelihood::{self, NoisePrecision};
use crate::memory::{self, MemorableSet, SelectionStrategy};
use crate::network::{self, FlatWeights, MlpArch};
use crate::posterior::{DiagGaussianPosterior, Subsample};

/// Which matrix weighs the drift of past predictive means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    /// Inverse of the frozen GP kernel.
    Full,
    /// Plain squared error on the link outputs.
    Identity,
}

/// The four method variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "FROMP")]
    Fromp,
    #[serde(rename = "FRORP")]
    Frorp,
    #[serde(rename = "FROMP-L2")]
    FrompL2,
    #[serde(rename = "FRORP-L2")]
    FrorpL2,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Fromp,
        Variant::Frorp,
        Variant::FrompL2,
        Variant::FrorpL2,
    ];

    pub fn strategy(self) -> SelectionStrategy {
        match self {
            Variant::Fromp | Variant::FrompL2 => SelectionStrategy::TopRelevance,
            Variant::Frorp | Variant::FrorpL2 => SelectionStrategy::UniformRandom,
        }
    }

    pub fn kernel(self) -> KernelMode {
        match self {
            Variant::Fromp | Variant::Frorp => KernelMode::Full,
            Variant::FrompL2 | Variant::FrorpL2 => KernelMode::Identity,
        }
    }

    pub fn from_parts(strategy: SelectionStrategy, kernel: KernelMode) -> Self {
        match (strategy, kernel) {
            (SelectionStrategy::TopRelevance, KernelMode::Full) => Variant::Fromp,
            (SelectionStrategy::UniformRandom, KernelMode::Full) => Variant::Frorp,
            (SelectionStrategy::TopRelevance, KernelMode::Identity) => Variant::FrompL2,
            (SelectionStrategy::UniformRandom, KernelMode::Identity) => Variant::FrorpL2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fromp => "FROMP",
            Variant::Frorp => "FRORP",
            Variant::FrompL2 => "FROMP-L2",
            Variant::FrorpL2 => "FRORP-L2",
        }
    }
}

/// Regulariser weight, either absolute or as a multiple of the task size N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tau {
    TimesN { times_n: f64 },
    Absolute(f64),
}

impl Tau {
    pub fn resolve(self, n: usize) -> f64 {
        match self {
            Tau::TimesN { times_n } => times_n * n as f64,
            Tau::Absolute(t) => t,
        }
    }

    /// Keeps the regulariser's overall weight when memory shrinks from
    /// `reference_m` to `m` points per task: τ' = τ·reference_m/m.
    pub fn rescaled_for_memory(self, reference_m: usize, m: usize) -> Tau {
        let f = reference_m as f64 / m as f64;
        match self {
            Tau::TimesN { times_n } => Tau::TimesN {
                times_n: times_n * f,
            },
            Tau::Absolute(t) => Tau::Absolute(t * f),
        }
    }

    fn value(self) -> f64 {
        match self {
            Tau::TimesN { times_n } => times_n,
            Tau::Absolute(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: Tau,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: Option<f64>,
    pub memorable_per_task: usize,
    pub strategy: SelectionStrategy,
    pub kernel: KernelMode,
    pub delta: f64,
    pub seed: u64,
    /// Estimate the curvature sum on this many random examples per task.
    pub covariance_subsample: Option<usize>,
    /// Regularise against this many random past tasks per step instead of all.
    pub functional_task_subsample: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: Tau::TimesN { times_n: 0.5 },
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            batch_size: 128,
            grad_clip_norm: Some(10.0),
            memorable_per_task: 40,
            strategy: SelectionStrategy::TopRelevance,
            kernel: KernelMode::Full,
            delta: 1e-4,
            seed: 0,
            covariance_subsample: None,
            functional_task_subsample: None,
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        Variant::from_parts(self.strategy, self.kernel)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.strategy = variant.strategy();
        self.kernel = variant.kernel();
        self
    }

    /// Checks ranges; errors carry the offending field path under `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}{name}");
        let tau = self.tau.value();
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::config(field("tau"), "must be a finite non-negative number"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(field("learning_rate"), "must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field(name), "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config(field("adam_eps"), "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config(field("epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be at least 1"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(field("grad_clip_norm"), "must be positive"));
            }
        }
        if self.memorable_per_task == 0 {
            return Err(Error::config(field("memorable_per_task"), "must be at least 1"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config(field("delta"), "must be positive"));
        }
        if self.covariance_subsample == Some(0) {
            return Err(Error::config(field("covariance_subsample"), "must be at least 1"));
        }
        if self.functional_task_subsample == Some(0) {
            return Err(Error::config(field("functional_task_subsample"), "must be at least 1"));
        }
        Ok(())
    }
}

/// One completed task: what was remembered and the frozen prior over it.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub memorable: MemorableSet,
    pub snapshot: TaskSnapshot,
}

/// Frozen functional priors of all completed tasks, in task order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskMemoryBank {
    pub entries: Vec<BankEntry>,
}

impl TaskMemoryBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total memorable points over all tasks.
    pub fn total_points(&self) -> usize {
        self.entries.iter().map(|e| e.snapshot.len()).sum()
    }
}

/// Gradient of `½ Σ_k (m_k − m'_k)ᵀ A_k (m_k − m'_k)` for one past task,
/// where `A_k` is the frozen inverse kernel or the identity. The derivative
/// of the current kernel is not included. Returns the gradient and the
/// quadratic's value.
pub fn task_functional_grad(
    arch: &MlpArch,
    w: &FlatWeights,
    snap: &TaskSnapshot,
    kernel: KernelMode,
) -> Result<(Vec<f64>, f64)> {
    network::vjp_from_logits(arch, w, snap.inputs.view(), snap.head, |logits| {
        let m = snap.len();
        let width = logits.ncols();
        let probs: Vec<Vec<f64>> = logits
            .outer_iter()
            .map(|r| likelihood::link(r.as_slice().expect("contiguous")))
            .collect();
        let lams: Vec<NoisePrecision> = logits
            .outer_iter()
            .map(|r| likelihood::noise_precision(r.as_slice().expect("contiguous")))
            .collect();
        let mut seeds = Array2::zeros((m, width));
        let mut value = 0.0;
        for (c, &class) in snap.classes.iter().enumerate() {
            let diff: ndarray::Array1<f64> =
                (0..m).map(|i| probs[i][class] - snap.means[c][i]).collect();
            let alpha = match kernel {
                KernelMode::Full => snap.factors[c].solve_vec(diff.view())?,
                KernelMode::Identity => diff.clone(),
            };
            value += 0.5 * diff.dot(&alpha);
            // ∇_w m_class(x_i) = Λ_i[class, :] J_i
            for i in 0..m {
                match &lams[i] {
                    NoisePrecision::Scalar(l) => seeds[[i, 0]] += alpha[i] * l,
                    NoisePrecision::Matrix(lam) => {
                        for j in 0..width {
                            seeds[[i, j]] += alpha[i] * lam[[class, j]];
                        }
                    }
                }
            }
        }
        Ok((seeds, value))
    })
}

/// Sum of [`task_functional_grad`] over every bank entry (zero for an empty bank).
pub fn functional_grad(
    arch: &MlpArch,
    w: &FlatWeights,
    bank: &TaskMemoryBank,
    kernel: KernelMode,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; arch.param_count()];
    for entry in &bank.entries {
        let (gt, _) = task_functional_grad(arch, w, &entry.snapshot, kernel)?;
        for (a, b) in g.iter_mut().zip(&gt) {
            *a += b;
        }
    }
    Ok(g)
}

/// Frozen-prior regulariser value `½ Σ_{s,k} (m − m')ᵀ A (m − m')`.
pub fn functional_penalty(
    arch: &MlpArch,
    w: &FlatWeights,
    bank: &TaskMemoryBank,
    kernel: KernelMode,
) -> Result<f64> {
    let mut total = 0.0;
    for entry in &bank.entries {
        let snap = &entry.snapshot;
        let probs = gp::predictive_mean(arch, w, snap.inputs.view(), snap.head)?;
        for (c, &class) in snap.classes.iter().enumerate() {
            let diff = &probs.column(class) - &snap.means[c];
            let alpha = match kernel {
                KernelMode::Full => snap.factors[c].solve_vec(diff.view())?,
                KernelMode::Identity => diff.clone(),
            };
            total += 0.5 * diff.dot(&alpha);
        }
    }
    Ok(total)
}

/// `N·ℓ̄_t(w) + τ·½ Σ (m − m')ᵀ A (m − m')` (trace term omitted).
pub fn fromp_objective(
    arch: &MlpArch,
    w: &FlatWeights,
    data: &LabeledDataset,
    head: usize,
    bank: &TaskMemoryBank,
    tau: f64,
    kernel: KernelMode,
) -> Result<f64> {
    let loss = network::summed_loss(arch, w, data.inputs(), data.labels(), head)?;
    if tau == 0.0 || bank.is_empty() {
        return Ok(loss);
    }
    Ok(loss + tau * functional_penalty(arch, w, bank, kernel)?)
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl AdamParams {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            clip_norm: cfg.grad_clip_norm,
        }
    }
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }
}

/// Rescales `g` in place so its Euclidean norm is at most `max_norm`.
/// Returns the factor applied.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= f);
        f
    } else {
        1.0
    }
}

/// One bias-corrected Adam update of `w` with gradient `g` (clipped first if configured).
pub fn adam_step(state: &mut AdamState, w: &mut FlatWeights, g: &mut [f64], params: &AdamParams) {
    if let Some(c) = params.clip_norm {
        clip_global_norm(g, c);
    }
    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - params.beta1.powi(t);
    let bc2 = 1.0 - params.beta2.powi(t);
    let step = params.learning_rate / bc1;
    let w = w.as_mut_slice();
    for i in 0..w.len() {
        let gi = g[i];
        let m = params.beta1 * state.first[i] + (1.0 - params.beta1) * gi;
        let v = params.beta2 * state.second[i] + (1.0 - params.beta2) * gi * gi;
        state.first[i] = m;
        state.second[i] = v;
        w[i] -= step * m / ((v / bc2).sqrt() + params.eps);
    }
}

/// Derives an independent stream seed from a base seed and tags (splitmix64).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x ^= t.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_MEMORY: u64 = 2;
const STREAM_COVARIANCE: u64 = 3;
const STREAM_TASK_SUBSAMPLE: u64 = 4;

/// Summary of one trained task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub steps: u64,
    pub tau: f64,
    pub final_objective: f64,
    pub memorable: Vec<usize>,
}

/// Mutable state threaded through a task sequence.
#[derive(Debug, Clone)]
pub struct Learner {
    pub arch: MlpArch,
    pub config: TrainConfig,
    pub weights: FlatWeights,
    pub posterior: DiagGaussianPosterior,
    pub bank: TaskMemoryBank,
    adam: AdamState,
}

impl Learner {
    /// Fresh learner: He-initialised weights (also the posterior mean) and prior precision δ.
    pub fn new(arch: MlpArch, config: TrainConfig) -> Result<Self> {
        config.validate("")?;
        let weights = network::init_weights(&arch, config.seed);
        let posterior =
            DiagGaussianPosterior::new(arch.param_count(), config.delta)?.with_mean(weights.clone())?;
        let adam = AdamState::new(arch.param_count());
        Ok(Self {
            arch,
            config,
            weights,
            posterior,
            bank: TaskMemoryBank::default(),
            adam,
        })
    }

    /// Restarts optimisation from the posterior mean with fresh Adam moments.
    pub fn begin_task(&mut self) {
        self.weights = self.posterior.mean().clone();
        self.adam = AdamState::new(self.arch.param_count());
    }

    /// Combined gradient for one minibatch: the loss gradient scaled to the
    /// whole task (`n_total / batch`) plus τ times the functional gradient.
    pub fn combined_grad(
        &self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        head: usize,
        n_total: usize,
        step: u64,
    ) -> Result<(Vec<f64>, f64)> {
        let (loss, mut g) =
            network::loss_and_grad(&self.arch, &self.weights, inputs, labels, head)?;
        let scale = n_total as f64 / labels.len() as f64;
        g.iter_mut().for_each(|v| *v *= scale);
        let tau = self.config.tau.resolve(n_total);
        if tau != 0.0 && !self.bank.is_empty() {
            let entries: Vec<&BankEntry> = match self.config.functional_task_subsample {
                Some(k) if k < self.bank.len() => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        self.config.seed,
                        &[STREAM_TASK_SUBSAMPLE, self.bank.len() as u64, step],
                    ));
                    let mut idx: Vec<usize> = (0..self.bank.len()).collect();
                    idx.shuffle(&mut rng);
                    idx.truncate(k);
                    idx.sort_unstable();
                    idx.iter().map(|&i| &self.bank.entries[i]).collect()
                }
                _ => self.bank.entries.iter().collect(),
            };
            let weight = tau * self.bank.len() as f64 / entries.len() as f64;
            for entry in entries {
                let (gf, _) =
                    task_functional_grad(&self.arch, &self.weights, &entry.snapshot, self.config.kernel)?;
                for (a, b) in g.iter_mut().zip(&gf) {
                    *a += weight * b;
                }
            }
        }
        Ok((g, loss * scale))
    }

    /// One Adam step on a minibatch.
    pub fn step(
        &mut self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        head: usize,
        n_total: usize,
    ) -> Result<f64> {
        let (mut g, loss) = self.combined_grad(inputs, labels, head, n_total, self.adam.steps)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training gradient"));
        }
        let params = AdamParams::from_config(&self.config);
        adam_step(&mut self.adam, &mut self.weights, &mut g, &params);
        Ok(loss)
    }

    /// Posterior refresh, memorable selection and snapshot for a finished task.
    pub fn finish_task(
        &mut self,
        task_index: usize,
        train: &LabeledDataset,
        head: usize,
    ) -> Result<&BankEntry> {
        let subsample = self.config.covariance_subsample.map(|size| Subsample {
            size,
            seed: derive_seed(self.config.seed, &[STREAM_COVARIANCE, task_index as u64]),
        });
        self.posterior =
            self.posterior
                .update_diag_covariance(&self.arch, &self.weights, train, head, subsample)?;
        let m = self.config.memorable_per_task.min(train.len());
        let memorable = memory::select_memorable(
            &self.arch,
            &self.weights,
            train,
            head,
            task_index,
            m,
            self.config.strategy,
            derive_seed(self.config.seed, &[STREAM_MEMORY, task_index as u64]),
        )?;
        let classes = if self.arch.head_width(head)? == 1 {
            vec![0]
        } else {
            train.classes_present()
        };
        let variance = self.posterior.variance();
        let snapshot = gp::snapshot_task(
            &self.arch,
            &self.weights,
            &variance,
            SnapshotRequest {
                task: task_index,
                head,
                inputs: memorable.inputs.view(),
                classes: &classes,
            },
        )?;
        self.bank.entries.push(BankEntry {
            memorable,
            snapshot,
        });
        Ok(self.bank.entries.last().expect("just pushed"))
    }

    /// Trains on one task from the current posterior mean, then refreshes the
    /// posterior and appends the task's frozen prior to the bank.
    pub fn train_task(&mut self, task_index: usize, task: &Task) -> Result<TaskReport> {
        self.begin_task();
        let n = task.train.len();
        let batch = self.config.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..self.config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.config.seed,
                &[STREAM_SHUFFLE, task_index as u64, epoch as u64],
            ));
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let inputs = task.train.inputs().select(Axis(0), chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| task.train.labels()[i]).collect();
                self.step(inputs.view(), &labels, task.head, n)?;
            }
        }
        let tau = self.config.tau.resolve(n);
        let final_objective = fromp_objective(
            &self.arch,
            &self.weights,
            &task.train,
            task.head,
            &self.bank,
            tau,
            self.config.kernel,
        )?;
        let steps = self.adam.steps;
        let entry = self.finish_task(task_index, &task.train, task.head)?;
        Ok(TaskReport {
            task: task_index,
            steps,
            tau,
            final_objective,
            memorable: entry.memorable.indices.clone(),
        })
    }
}

/// Fraction of correctly classified examples under `head`.
pub fn accuracy(arch: &MlpArch, w: &FlatWeights, data: &LabeledDataset, head: usize) -> Result<f64> {
    let logits = network::forward_batch(arch, w, data.inputs(), head)?;
    let correct = logits
        .outer_iter()
        .zip(data.labels())
        .filter(|(row, &y)| predict(row.as_slice().expect("contiguous")) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Predicted class from logits.
pub fn predict(f: &[f64]) -> usize {
    match f {
        [single] => usize::from(*single > 0.0),
        _ => {
            let mut best = 0;
            for (k, v) in f.iter().enumerate() {
                if *v > f[best] {
                    best = k;
                }
            }
            best
        }
    }
}

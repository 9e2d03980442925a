//! Diagonal Gaussian weight posterior and its per-task precision update.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::likelihood;
use crate::network::{self, FlatWeights, MlpArch};

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"FROMP-POST-1";

/// Rows processed per batched backward pass when accumulating curvature.
const CHUNK: usize = 256;

/// `N(μ, diag(1/precision))` with prior precision δ folded into `precision`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianPosterior {
    mean: FlatWeights,
    precision: Vec<f64>,
    delta: f64,
}

/// Random subset used to estimate the curvature sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subsample {
    pub size: usize,
    pub seed: u64,
}

impl DiagGaussianPosterior {
    /// Zero mean and precision δ·1.
    pub fn new(param_count: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::NonPositiveDelta(delta));
        }
        Ok(Self {
            mean: FlatWeights::zeros(param_count),
            precision: vec![delta; param_count],
            delta,
        })
    }

    pub fn mean(&self) -> &FlatWeights {
        &self.mean
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn variance(&self) -> Vec<f64> {
        self.precision.iter().map(|p| 1.0 / p).collect()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn param_count(&self) -> usize {
        self.precision.len()
    }

    pub fn with_mean(mut self, mean: FlatWeights) -> Result<Self> {
        if mean.len() != self.precision.len() {
            return Err(Error::DimensionMismatch {
                context: "posterior mean length",
                expected: self.precision.len(),
                got: mean.len(),
            });
        }
        self.mean = mean;
        Ok(self)
    }

    /// Adds `Σ_i diag(J_iᵀ Λ_i J_i)` over the task data (at `w`) to the
    /// precision and moves the mean to `w`.
    pub fn update_diag_covariance(
        &self,
        arch: &MlpArch,
        w: &FlatWeights,
        data: &LabeledDataset,
        head: usize,
        subsample: Option<Subsample>,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if w.len() != self.precision.len() {
            return Err(Error::DimensionMismatch {
                context: "weights vs posterior size",
                expected: self.precision.len(),
                got: w.len(),
            });
        }
        let mut term = match subsample {
            Some(Subsample { size, seed }) if size < data.len() => {
                if size == 0 {
                    return Err(Error::EmptyDataset);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut idx = sample(&mut rng, data.len(), size).into_vec();
                idx.sort_unstable();
                let sub = data.subset(&idx);
                let mut t = diag_ggn(arch, w, sub.inputs(), head)?;
                let scale = data.len() as f64 / size as f64;
                t.iter_mut().for_each(|v| *v *= scale);
                t
            }
            _ => diag_ggn(arch, w, data.inputs(), head)?,
        };
        for (t, p) in term.iter_mut().zip(&self.precision) {
            *t += p;
        }
        Ok(Self {
            mean: w.clone(),
            precision: term,
            delta: self.delta,
        })
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.precision.len() as u64).to_le_bytes())?;
        out.write_all(&self.delta.to_le_bytes())?;
        for v in self.mean.as_slice().iter().chain(&self.precision) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 12];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing FROMP-POST-1 magic".into()));
        }
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let p = u64::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let delta = f64::from_le_bytes(word);
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            input.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mean = read_vec(p)?;
        let precision = read_vec(p)?;
        if !(delta > 0.0) {
            return Err(Error::NonPositiveDelta(delta));
        }
        if precision.iter().any(|&v| !(v >= delta)) {
            return Err(Error::Checkpoint("precision below prior precision".into()));
        }
        Ok(Self {
            mean: FlatWeights::from_vec(mean),
            precision,
            delta,
        })
    }
}

/// `init_posterior`: zero mean, precision δ.
pub fn init_posterior(param_count: usize, delta: f64) -> Result<DiagGaussianPosterior> {
    DiagGaussianPosterior::new(param_count, delta)
}

/// `Σ_i diag(J_iᵀ Λ_i J_i)` over the rows of `inputs`.
///
/// For a sigmoid head this is `Σ_i λ_i J_i∘J_i`. For a softmax head Λ =
/// Diag(S) − SSᵀ = Σ_k S_k (e_k − S)(e_k − S)ᵀ, so the diagonal is a sum of K
/// weighted squared vector-Jacobian products with seeds `e_k − S`.
pub fn diag_ggn(
    arch: &MlpArch,
    w: &FlatWeights,
    inputs: ArrayView2<'_, f64>,
    head: usize,
) -> Result<Vec<f64>> {
    let width = arch.head_width(head)?;
    let mut acc = vec![0.0; arch.param_count()];
    let n = inputs.nrows();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let chunk = inputs.slice(ndarray::s![start..end, ..]);
        let logits = network::forward_batch(arch, w, chunk, head)?;
        let b = end - start;
        if width == 1 {
            let seeds = Array2::ones((b, 1));
            let weights: Array1<f64> = logits
                .column(0)
                .iter()
                .map(|&f| likelihood::relevance(&[f]))
                .collect();
            network::accumulate_weighted_sq_vjp(
                arch,
                w,
                chunk,
                seeds.view(),
                weights.view(),
                head,
                &mut acc,
            )?;
        } else {
            let probs: Vec<Vec<f64>> = logits
                .outer_iter()
                .map(|row| likelihood::softmax(row.as_slice().expect("contiguous")))
                .collect();
            for k in 0..width {
                let mut seeds = Array2::zeros((b, width));
                let mut weights = Array1::zeros(b);
                for (i, s) in probs.iter().enumerate() {
                    weights[i] = s[k];
                    for (j, &sj) in s.iter().enumerate() {
                        seeds[[i, j]] = if j == k { 1.0 - sj } else { -sj };
                    }
                }
                network::accumulate_weighted_sq_vjp(
                    arch,
                    w,
                    chunk,
                    seeds.view(),
                    weights.view(),
                    head,
                    &mut acc,
                )?;
            }
        }
        start = end;
    }
    Ok(acc)
}

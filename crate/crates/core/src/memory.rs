//! Memorable-past selection.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::likelihood;
use crate::network::{self, FlatWeights, MlpArch};

/// How memorable examples are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Largest λ (binary) or Tr(Λ) (multiclass) first.
    TopRelevance,
    UniformRandom,
}

/// Inputs kept from one task, with their indices into that task's training set.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorableSet {
    pub task: usize,
    pub indices: Vec<usize>,
    pub inputs: Array2<f64>,
    pub strategy: SelectionStrategy,
    pub seed: u64,
}

/// JSON form of a memorable set (inputs are recoverable from the dataset).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorableManifest {
    pub task: usize,
    pub indices: Vec<usize>,
    pub strategy: SelectionStrategy,
    pub seed: u64,
}

impl MemorableSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn manifest(&self) -> MemorableManifest {
        MemorableManifest {
            task: self.task,
            indices: self.indices.clone(),
            strategy: self.strategy,
            seed: self.seed,
        }
    }
}

/// Relevance of every example under the current weights, one forward sweep.
pub fn relevances(
    arch: &MlpArch,
    w: &FlatWeights,
    data: &LabeledDataset,
    head: usize,
) -> Result<Vec<f64>> {
    let logits = network::forward_batch(arch, w, data.inputs(), head)?;
    Ok(logits
        .outer_iter()
        .map(|row| likelihood::relevance(row.as_slice().expect("contiguous row")))
        .collect())
}

/// Indices of the `m` largest scores, descending; ties go to the lower index.
pub fn top_m_indices(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    if m < order.len() {
        order.select_nth_unstable_by(m, cmp);
        order.truncate(m);
    }
    order.sort_unstable_by(cmp);
    order
}

#[allow(clippy::too_many_arguments)]
pub fn select_memorable(
    arch: &MlpArch,
    w: &FlatWeights,
    data: &LabeledDataset,
    head: usize,
    task: usize,
    m: usize,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<MemorableSet> {
    if m == 0 || m > data.len() {
        return Err(Error::DatasetTooSmall {
            requested: m,
            available: data.len(),
        });
    }
    let indices = match strategy {
        SelectionStrategy::TopRelevance => top_m_indices(&relevances(arch, w, data, head)?, m),
        SelectionStrategy::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, data.len(), m).into_vec()
        }
    };
    let inputs = data.inputs().select(ndarray::Axis(0), &indices);
    Ok(MemorableSet {
        task,
        indices,
        inputs,
        strategy,
        seed,
    })
}

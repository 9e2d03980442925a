//! Task-boundary detection without task labels.
//!
//! Before training on each minibatch, the squared drift of the predictive
//! means between the current weights and the last completed posterior mean
//! is compared with the previous minibatch's drift using Welch's t. Data
//! from an unseen task drifts less, so a large positive statistic signals a
//! new task.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TaskStream};
use crate::error::{Error, Result};
use crate::gp;
use crate::network::{FlatWeights, MlpArch};
use crate::trainer::{derive_seed, Learner, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub threshold: f64,
    /// Minibatches after a detected boundary (and at stream start) with no test.
    pub warmup_iters: usize,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            threshold: 1.2,
            warmup_iters: 10,
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::config(format!("{prefix}threshold"), "must be positive"));
        }
        Ok(())
    }
}

/// `(m_t,i,k − m_{t−1},i,k)²` for every sample `i` and output function `k`
/// (one column for a sigmoid head).
pub fn drift_scores(
    arch: &MlpArch,
    w_current: &FlatWeights,
    w_prior_mean: &FlatWeights,
    batch: ArrayView2<'_, f64>,
    head: usize,
) -> Result<Array2<f64>> {
    let now = gp::predictive_mean(arch, w_current, batch, head)?;
    let before = gp::predictive_mean(arch, w_prior_mean, batch, head)?;
    Ok((&now - &before).mapv(|d| d * d))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's t for one output function, positive when `prev` exceeds `curr`.
/// With both variances zero the result is 0 for equal means and an infinity
/// signed like the mean difference otherwise.
pub fn welch_t(prev: &[f64], curr: &[f64]) -> Result<f64> {
    for s in [prev, curr] {
        if s.len() < 2 {
            return Err(Error::DatasetTooSmall {
                requested: 2,
                available: s.len(),
            });
        }
    }
    let (m1, v1) = mean_var(prev);
    let (m2, v2) = mean_var(curr);
    let se = (v1 / prev.len() as f64 + v2 / curr.len() as f64).sqrt();
    let diff = m1 - m2;
    if se == 0.0 {
        return Ok(if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        });
    }
    Ok(diff / se)
}

/// Welch's t per output function (column), averaged with equal weights.
pub fn welch_statistic(prev: ArrayView2<'_, f64>, curr: ArrayView2<'_, f64>) -> Result<f64> {
    if prev.ncols() != curr.ncols() || prev.ncols() == 0 {
        return Err(Error::DimensionMismatch {
            context: "output functions in drift scores",
            expected: prev.ncols(),
            got: curr.ncols(),
        });
    }
    let mut total = 0.0;
    for (p, c) in prev.axis_iter(Axis(1)).zip(curr.axis_iter(Axis(1))) {
        total += welch_t(&p.to_vec(), &c.to_vec())?;
    }
    let t = total / prev.ncols() as f64;
    // Opposite infinities from different functions carry no direction.
    Ok(if t.is_nan() { 0.0 } else { t })
}

/// One tested (or skipped) minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub iteration: usize,
    /// `None` during warmup.
    pub statistic: Option<f64>,
    pub detected: bool,
}

/// Stateful test over consecutive minibatches' drift scores.
#[derive(Debug, Clone)]
pub struct BoundaryDetector {
    config: BoundaryConfig,
    previous: Option<Array2<f64>>,
    since_boundary: usize,
    iteration: usize,
}

impl BoundaryDetector {
    pub fn new(config: BoundaryConfig) -> Self {
        Self {
            config,
            previous: None,
            since_boundary: 0,
            iteration: 0,
        }
    }

    /// Feeds the drift scores of the next minibatch.
    pub fn observe(&mut self, scores: Array2<f64>) -> Result<DetectionRecord> {
        let iteration = self.iteration;
        self.iteration += 1;
        let testing = self.since_boundary >= self.config.warmup_iters;
        let statistic = match (&self.previous, testing) {
            (Some(prev), true) => Some(welch_statistic(prev.view(), scores.view())?),
            _ => None,
        };
        let detected = statistic.is_some_and(|t| t > self.config.threshold);
        if detected {
            self.since_boundary = 0;
        }
        self.since_boundary += 1;
        self.previous = Some(scores);
        Ok(DetectionRecord {
            iteration,
            statistic,
            detected,
        })
    }
}

/// Weights the detector compares and trains as minibatches arrive.
pub trait TrainedState {
    fn current(&self) -> &FlatWeights;
    /// Mean of the last completed posterior.
    fn prior_mean(&self) -> &FlatWeights;
    fn train_on(&mut self, inputs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()>;
    /// Closes the task made of everything seen since the previous boundary.
    fn close_task(&mut self) -> Result<()>;
}

/// Runs the test before training on each minibatch; returns one record per minibatch.
pub fn detect<S: TrainedState>(
    arch: &MlpArch,
    head: usize,
    batches: &[(Array2<f64>, Vec<usize>)],
    state: &mut S,
    config: BoundaryConfig,
) -> Result<Vec<DetectionRecord>> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut detector = BoundaryDetector::new(config);
    let mut records = Vec::with_capacity(batches.len());
    for (inputs, labels) in batches {
        let scores = drift_scores(arch, state.current(), state.prior_mean(), inputs.view(), head)?;
        let rec = detector.observe(scores)?;
        if rec.detected {
            state.close_task()?;
        }
        state.train_on(inputs.view(), labels)?;
        records.push(rec);
    }
    Ok(records)
}

/// Online FROMP learner that only learns of tasks through detected boundaries.
#[derive(Debug, Clone)]
pub struct OnlineFromp {
    pub learner: Learner,
    head: usize,
    seen: Vec<(Array2<f64>, Vec<usize>)>,
    class_count: usize,
    task_size_hint: usize,
    closed: usize,
}

impl OnlineFromp {
    /// `task_size_hint` stands in for N when τ is given as a multiple of N and
    /// bounds how many recent examples form a closed task.
    pub fn new(arch: MlpArch, config: TrainConfig, head: usize, class_count: usize, task_size_hint: usize) -> Result<Self> {
        let mut learner = Learner::new(arch, config)?;
        learner.begin_task();
        Ok(Self {
            learner,
            head,
            seen: Vec::new(),
            class_count,
            task_size_hint,
            closed: 0,
        })
    }

    pub fn closed_tasks(&self) -> usize {
        self.closed
    }
}

impl TrainedState for OnlineFromp {
    fn current(&self) -> &FlatWeights {
        &self.learner.weights
    }

    fn prior_mean(&self) -> &FlatWeights {
        self.learner.posterior.mean()
    }

    fn train_on(&mut self, inputs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        self.learner.step(inputs, labels, self.head, self.task_size_hint)?;
        self.seen.push((inputs.to_owned(), labels.to_vec()));
        // Keep roughly one task's worth of the most recent examples.
        let mut total: usize = self.seen.iter().map(|(_, y)| y.len()).sum();
        while self.seen.len() > 1 && total - self.seen[0].1.len() >= self.task_size_hint {
            total -= self.seen.remove(0).1.len();
        }
        Ok(())
    }

    fn close_task(&mut self) -> Result<()> {
        if self.seen.is_empty() {
            return Ok(());
        }
        let views: Vec<ArrayView2<'_, f64>> = self.seen.iter().map(|(x, _)| x.view()).collect();
        let inputs = ndarray::concatenate(Axis(0), &views).expect("same width");
        let labels: Vec<usize> = self.seen.iter().flat_map(|(_, y)| y.iter().copied()).collect();
        let data = LabeledDataset::new(inputs, labels, self.class_count)?;
        self.learner.finish_task(self.closed, &data, self.head)?;
        self.closed += 1;
        self.seen.clear();
        // The new posterior mean is the current weights, so training continues in place.
        self.learner.begin_task();
        Ok(())
    }
}

/// Minibatch stream over all tasks in order: each task's training set is
/// shuffled and batched `epochs` times before the next task starts. Also
/// returns the index of the first minibatch of every task after the first.
pub fn minibatch_stream(
    stream: &TaskStream,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> (Vec<(Array2<f64>, Vec<usize>)>, Vec<usize>) {
    let mut batches = Vec::new();
    let mut boundaries = Vec::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        if t > 0 {
            boundaries.push(batches.len());
        }
        let n = task.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7, t as u64, epoch as u64]));
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch_size) {
                let x = task.train.inputs().select(Axis(0), chunk);
                let y = chunk.iter().map(|&i| task.train.labels()[i]).collect();
                batches.push((x, y));
            }
        }
    }
    (batches, boundaries)
}

/// Detected boundaries against the true ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub true_boundaries: Vec<usize>,
    pub detected: Vec<usize>,
    /// True boundaries with a detection no later than `tolerance` minibatches after them.
    pub hits: usize,
    pub false_positives: usize,
}

/// Matches each true boundary with the first detection in
/// `[boundary, boundary + tolerance]`; other detections are false positives.
pub fn summarize(records: &[DetectionRecord], true_boundaries: &[usize], tolerance: usize) -> DetectionSummary {
    let detected: Vec<usize> = records.iter().filter(|r| r.detected).map(|r| r.iteration).collect();
    let mut used = vec![false; detected.len()];
    let mut hits = 0;
    for &b in true_boundaries {
        if let Some(k) = (0..detected.len()).find(|&k| !used[k] && detected[k] >= b && detected[k] <= b + tolerance) {
            used[k] = true;
            hits += 1;
        }
    }
    DetectionSummary {
        true_boundaries: true_boundaries.to_vec(),
        false_positives: used.iter().filter(|u| !**u).count(),
        detected,
        hits,
    }
}

/// CSV with header `iteration,statistic,detected`; warmup rows have an empty statistic.
pub fn write_detection_csv<W: Write>(records: &[DetectionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "statistic", "detected"])?;
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            r.statistic.map(|t| t.to_string()).unwrap_or_default(),
            u8::from(r.detected).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

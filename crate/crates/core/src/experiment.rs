//! Experiment orchestration: JSON configs, task streams, per-seed runs,
//! accuracy matrices and the files written for each run.
//!
//! Output layout under the run directory:
//!
//! ```text
//! <out>/<VARIANT>/[m<M>/]metrics.csv
//! <out>/<VARIANT>/[m<M>/]seed_<s>/accuracy_matrix.csv
//!                                 train_accuracy_matrix.csv   (evaluate_train)
//!                                 independent_accuracy.csv    (independent_runs)
//!                                 memorable.json
//!                                 run.json
//!                                 checkpoints/
//! <out>/summary.csv
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boundary::{self, BoundaryConfig, DetectionRecord, DetectionSummary, OnlineFromp};
use crate::data::{self, GlyphConfig, TaskStream, ToyConfig, DEFAULT_SPLIT_PAIRS};
use crate::error::{Error, Result};
use crate::gp::TaskSnapshot;
use crate::memory::MemorableManifest;
use crate::metrics::{self, AccuracyMatrix, Metrics};
use crate::network::MlpArch;
use crate::numerics::SpdFactor;
use crate::posterior::DiagGaussianPosterior;
use crate::trainer::{self, Learner, TaskReport, Tau, TrainConfig, Variant};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming how many seeds run at once.
pub const THREADS_ENV: &str = "FROMP_THREADS";

fn default_pairs() -> Vec<(usize, usize)> {
    DEFAULT_SPLIT_PAIRS.to_vec()
}

fn default_permuted_tasks() -> usize {
    10
}

fn default_true() -> bool {
    true
}

/// Where the task stream comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BenchmarkConfig {
    Toy {
        #[serde(default)]
        toy: ToyConfig,
        #[serde(default)]
        data_seed: u64,
        /// Read the stream from a CSV export instead of generating it.
        #[serde(default)]
        csv: Option<PathBuf>,
    },
    SplitMnist {
        data_dir: PathBuf,
        #[serde(default = "default_pairs")]
        pairs: Vec<(usize, usize)>,
        #[serde(default)]
        train_per_task: Option<usize>,
        #[serde(default)]
        test_per_task: Option<usize>,
    },
    PermutedMnist {
        data_dir: PathBuf,
        #[serde(default = "default_permuted_tasks")]
        tasks: usize,
        #[serde(default)]
        train_per_task: Option<usize>,
        #[serde(default)]
        test_per_task: Option<usize>,
        #[serde(default)]
        data_seed: u64,
    },
    PermutedGlyph {
        #[serde(default)]
        glyph: GlyphConfig,
        #[serde(default = "default_permuted_tasks")]
        tasks: usize,
        #[serde(default)]
        data_seed: u64,
    },
}

impl BenchmarkConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkConfig::Toy { .. } => "toy",
            BenchmarkConfig::SplitMnist { .. } => "split-mnist",
            BenchmarkConfig::PermutedMnist { .. } => "permuted-mnist",
            BenchmarkConfig::PermutedGlyph { .. } => "permuted-glyph",
        }
    }

    /// Input preprocessing, recorded with every run.
    pub fn preprocessing(&self) -> &'static str {
        match self {
            BenchmarkConfig::Toy { .. } => "raw 2D coordinates",
            BenchmarkConfig::SplitMnist { .. } | BenchmarkConfig::PermutedMnist { .. } => {
                "pixels divided by 255, no centering"
            }
            BenchmarkConfig::PermutedGlyph { .. } => "synthetic glyph pixels in [0,1]",
        }
    }

    pub fn build(&self) -> Result<TaskStream> {
        let cap = |s: TaskStream, n: Option<usize>, nt: Option<usize>| {
            if n.is_none() && nt.is_none() {
                s
            } else {
                s.truncated(n.unwrap_or(usize::MAX), nt.unwrap_or(usize::MAX))
            }
        };
        match self {
            BenchmarkConfig::Toy { toy, data_seed, csv } => match csv {
                Some(path) => data::read_toy_csv(BufReader::new(File::open(path)?)),
                None => data::make_toy_tasks_with(toy, *data_seed),
            },
            BenchmarkConfig::SplitMnist {
                data_dir,
                pairs,
                train_per_task,
                test_per_task,
            } => {
                let (train, test) = data::load_mnist_dir(data_dir)?;
                let s = data::make_split_tasks(&train, &test, pairs)?;
                Ok(cap(s, *train_per_task, *test_per_task))
            }
            BenchmarkConfig::PermutedMnist {
                data_dir,
                tasks,
                train_per_task,
                test_per_task,
                data_seed,
            } => {
                let (train, test) = data::load_mnist_dir(data_dir)?;
                let train = train.truncate(train_per_task.unwrap_or(usize::MAX));
                let test = test.truncate(test_per_task.unwrap_or(usize::MAX));
                data::make_permuted_tasks(&train, &test, *tasks, *data_seed)
            }
            BenchmarkConfig::PermutedGlyph {
                glyph,
                tasks,
                data_seed,
            } => {
                let (train, test) = data::make_glyph_dataset(glyph, *data_seed)?;
                data::make_permuted_tasks(&train, &test, *tasks, data_seed.wrapping_add(1))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
}

/// A full experiment: one benchmark, one network, one set of training
/// hyperparameters, several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub benchmark: BenchmarkConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Overrides `train.strategy` and `train.kernel`.
    #[serde(default)]
    pub variant: Option<Variant>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Run once per memory size instead of `train.memorable_per_task` alone.
    #[serde(default)]
    pub memory_sizes: Option<Vec<usize>>,
    /// Memory size `train.tau` was set for; τ is rescaled by this/M for other sizes.
    #[serde(default)]
    pub tau_reference_memory: Option<usize>,
    /// Train a fresh model on each task alone to get FWT.
    #[serde(default)]
    pub independent_runs: bool,
    /// Also record accuracy on the training sets.
    #[serde(default)]
    pub evaluate_train: bool,
    /// Also fill `R[i][j]` for tasks not yet trained.
    #[serde(default)]
    pub evaluate_forward: bool,
    #[serde(default = "default_true")]
    pub write_checkpoints: bool,
    /// Settings for `boundary-detect`.
    #[serde(default)]
    pub boundary: Option<BoundaryConfig>,
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.network.hidden.contains(&0) {
            return Err(Error::config("network.hidden", "layer widths must be positive"));
        }
        self.train.validate("train.")?;
        if let Some(sizes) = &self.memory_sizes {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::config("memory_sizes", "need positive sizes"));
            }
        }
        if self.tau_reference_memory == Some(0) {
            return Err(Error::config("tau_reference_memory", "must be positive"));
        }
        if let Some(b) = &self.boundary {
            b.validate("boundary.")?;
        }
        match &self.benchmark {
            BenchmarkConfig::Toy { toy, .. } => {
                if toy.tasks == 0 || toy.per_task < 2 || toy.test_per_task == 0 {
                    return Err(Error::config("benchmark.toy", "need tasks ≥ 1, per_task ≥ 2, test_per_task ≥ 1"));
                }
            }
            BenchmarkConfig::SplitMnist { pairs, .. } if pairs.is_empty() => {
                return Err(Error::config("benchmark.pairs", "need at least one class pair"));
            }
            BenchmarkConfig::PermutedMnist { tasks: 0, .. } | BenchmarkConfig::PermutedGlyph { tasks: 0, .. } => {
                return Err(Error::config("benchmark.tasks", "need at least one task"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn base_variant(&self) -> Variant {
        self.variant.unwrap_or_else(|| self.train.variant())
    }

    /// Training settings for one variant, memory size and seed.
    pub fn train_config(&self, variant: Variant, memory: usize, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone().with_variant(variant);
        cfg.seed = seed;
        if let Some(reference) = self.tau_reference_memory {
            cfg.tau = cfg.tau.rescaled_for_memory(reference, memory);
        }
        cfg.memorable_per_task = memory;
        cfg
    }

    pub fn memory_sizes(&self) -> Vec<usize> {
        self.memory_sizes
            .clone()
            .unwrap_or_else(|| vec![self.train.memorable_per_task])
    }
}

/// Number of seeds to run concurrently, from [`THREADS_ENV`] (default 1).
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Network for a stream: shared trunk, one head per distinct head index.
pub fn arch_for(stream: &TaskStream, hidden: &[usize]) -> Result<MlpArch> {
    MlpArch::new(stream.input_dim(), hidden.to_vec(), stream.head_widths.clone())
}

/// Everything recorded about one seed's run; enough to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub library_version: String,
    pub benchmark: String,
    pub preprocessing: String,
    pub variant: Variant,
    pub seed: u64,
    pub memorable_per_task: usize,
    pub config: ExperimentConfig,
    pub train: TrainConfig,
    pub accuracy: AccuracyMatrix,
    pub train_accuracy: Option<AccuracyMatrix>,
    pub independent_accuracy: Option<Vec<f64>>,
    pub metrics: Metrics,
    /// Final average over training sets, when recorded.
    pub final_avg_train: Option<f64>,
    pub tasks: Vec<TaskSummary>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub steps: u64,
    pub tau: f64,
    pub final_objective: f64,
}

impl From<&TaskReport> for TaskSummary {
    fn from(r: &TaskReport) -> Self {
        Self {
            task: r.task,
            steps: r.steps,
            tau: r.tau,
            final_objective: r.final_objective,
        }
    }
}

fn evaluate_row(
    learner: &Learner,
    stream: &TaskStream,
    upto: usize,
    forward: bool,
    train: bool,
) -> Result<Vec<Option<f64>>> {
    let mut row = vec![None; stream.len()];
    let last = if forward { stream.len() } else { upto + 1 };
    for (j, task) in stream.tasks.iter().enumerate().take(last) {
        let data = if train { &task.train } else { &task.test };
        row[j] = Some(trainer::accuracy(&learner.arch, &learner.weights, data, task.head)?);
    }
    Ok(row)
}

/// Trains one seed over the whole stream; writes its files under `out` when given.
pub fn run_seed(
    config: &ExperimentConfig,
    stream: &TaskStream,
    variant: Variant,
    memory: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<RunRecord> {
    let start = Instant::now();
    let arch = arch_for(stream, &config.network.hidden)?;
    let train_cfg = config.train_config(variant, memory, seed);
    let mut learner = Learner::new(arch.clone(), train_cfg.clone())?;
    let t = stream.len();
    let mut test_rows = Vec::with_capacity(t);
    let mut train_rows = Vec::with_capacity(t);
    let mut reports = Vec::with_capacity(t);
    let ckpt = match out {
        Some(dir) if config.write_checkpoints => Some(dir.join("checkpoints")),
        _ => None,
    };
    for (i, task) in stream.tasks.iter().enumerate() {
        reports.push(learner.train_task(i, task)?);
        test_rows.push(evaluate_row(&learner, stream, i, config.evaluate_forward, false)?);
        if config.evaluate_train {
            train_rows.push(evaluate_row(&learner, stream, i, config.evaluate_forward, true)?);
        }
        if let Some(dir) = &ckpt {
            write_checkpoint(dir, i, &learner)?;
        }
    }
    let accuracy = AccuracyMatrix::from_rows(test_rows)?;
    let train_accuracy = if config.evaluate_train {
        Some(AccuracyMatrix::from_rows(train_rows)?)
    } else {
        None
    };
    let independent_accuracy = if config.independent_runs && t > 1 {
        let mut acc = Vec::with_capacity(t);
        for (i, task) in stream.tasks.iter().enumerate() {
            let mut solo = Learner::new(arch.clone(), train_cfg.clone())?;
            solo.train_task(i, task)?;
            acc.push(trainer::accuracy(&arch, &solo.weights, &task.test, task.head)?);
        }
        Some(acc)
    } else {
        None
    };
    let metrics = metrics::compute_metrics(&accuracy, independent_accuracy.as_deref())?;
    let final_avg_train = match &train_accuracy {
        Some(r) => Some(metrics::final_average(r)?),
        None => None,
    };
    let record = RunRecord {
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        benchmark: config.benchmark.name().to_string(),
        preprocessing: config.benchmark.preprocessing().to_string(),
        variant,
        seed,
        memorable_per_task: memory,
        config: config.clone(),
        train: train_cfg,
        accuracy,
        train_accuracy,
        independent_accuracy,
        metrics,
        final_avg_train,
        tasks: reports.iter().map(TaskSummary::from).collect(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        write_run_files(dir, &record, &learner)?;
    }
    Ok(record)
}

fn write_run_files(dir: &Path, record: &RunRecord, learner: &Learner) -> Result<()> {
    fs::create_dir_all(dir)?;
    record.accuracy.write_csv(BufWriter::new(File::create(dir.join("accuracy_matrix.csv"))?))?;
    if let Some(r) = &record.train_accuracy {
        r.write_csv(BufWriter::new(File::create(dir.join("train_accuracy_matrix.csv"))?))?;
    }
    if let Some(ind) = &record.independent_accuracy {
        metrics::write_independent_csv(ind, BufWriter::new(File::create(dir.join("independent_accuracy.csv"))?))?;
    }
    let manifests: Vec<MemorableManifest> = learner.bank.entries.iter().map(|e| e.memorable.manifest()).collect();
    fs::write(dir.join("memorable.json"), serde_json::to_string_pretty(&manifests)?)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(record)?)?;
    Ok(())
}

/// One bank entry as listed in `bank.json`; array files sit next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifestEntry {
    pub memorable: MemorableManifest,
    pub head: usize,
    pub classes: Vec<usize>,
    pub input_dim: usize,
    /// `snapshots/task<s>_inputs.bin`: M×D inputs, row-major.
    pub inputs_file: String,
    /// Per class: means (M values) and lower Cholesky factor (M×M, row-major).
    pub means_files: Vec<String>,
    pub factor_files: Vec<String>,
    pub jitters: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub completed_tasks: usize,
    pub posterior_file: String,
    pub entries: Vec<BankManifestEntry>,
}

fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} values, found {} bytes",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes the posterior after task `task`, the newest snapshot's arrays and
/// a refreshed `bank.json` into `dir`.
pub fn write_checkpoint(dir: &Path, task: usize, learner: &Learner) -> Result<()> {
    let snaps = dir.join("snapshots");
    fs::create_dir_all(&snaps)?;
    let posterior_file = format!("posterior_task{task}.bin");
    learner
        .posterior
        .write_checkpoint(BufWriter::new(File::create(dir.join(&posterior_file))?))?;
    let mut entries = Vec::with_capacity(learner.bank.len());
    for (idx, entry) in learner.bank.entries.iter().enumerate() {
        let snap = &entry.snapshot;
        let s = snap.task;
        let inputs_file = format!("snapshots/task{s}_inputs.bin");
        let means_files: Vec<String> = snap.classes.iter().map(|k| format!("snapshots/task{s}_class{k}_means.bin")).collect();
        let factor_files: Vec<String> = snap.classes.iter().map(|k| format!("snapshots/task{s}_class{k}_factor.bin")).collect();
        // Snapshots are frozen; only the newest one needs writing.
        if idx + 1 == learner.bank.len() {
            write_f64s(&dir.join(&inputs_file), snap.inputs.iter().copied())?;
            for c in 0..snap.classes.len() {
                write_f64s(&dir.join(&means_files[c]), snap.means[c].iter().copied())?;
                write_f64s(&dir.join(&factor_files[c]), snap.factors[c].lower().iter().copied())?;
            }
        }
        entries.push(BankManifestEntry {
            memorable: entry.memorable.manifest(),
            head: snap.head,
            classes: snap.classes.clone(),
            input_dim: snap.inputs.ncols(),
            inputs_file,
            means_files,
            factor_files,
            jitters: snap.factors.iter().map(SpdFactor::jitter).collect(),
        });
    }
    let manifest = BankManifest {
        completed_tasks: task + 1,
        posterior_file,
        entries,
    };
    fs::write(dir.join("bank.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// A checkpoint directory read back.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub manifest: BankManifest,
    pub posterior: DiagGaussianPosterior,
    pub snapshots: Vec<TaskSnapshot>,
}

pub fn read_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let text = fs::read_to_string(dir.join("bank.json"))?;
    let manifest: BankManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bank.json: {e}")))?;
    let posterior = DiagGaussianPosterior::read_checkpoint(BufReader::new(File::open(dir.join(&manifest.posterior_file))?))?;
    let mut snapshots = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let m = e.memorable.indices.len();
        let inputs = Array2::from_shape_vec((m, e.input_dim), read_f64s(&dir.join(&e.inputs_file), m * e.input_dim)?)
            .expect("length checked");
        let mut means = Vec::new();
        let mut factors = Vec::new();
        for c in 0..e.classes.len() {
            means.push(read_f64s(&dir.join(&e.means_files[c]), m)?.into());
            let lower = Array2::from_shape_vec((m, m), read_f64s(&dir.join(&e.factor_files[c]), m * m)?)
                .expect("length checked");
            factors.push(SpdFactor::from_parts(lower, e.jitters[c])?);
        }
        snapshots.push(TaskSnapshot {
            task: e.memorable.task,
            head: e.head,
            classes: e.classes.clone(),
            inputs,
            means,
            factors,
        });
    }
    Ok(LoadedCheckpoint {
        manifest,
        posterior,
        snapshots,
    })
}

/// Aggregate over seeds for one (variant, memory size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub variant: Variant,
    pub memorable_per_task: usize,
    pub runs: Vec<RunRecord>,
}

impl GroupSummary {
    pub fn final_avg(&self) -> (f64, f64) {
        metrics::mean_and_stderr(&self.runs.iter().map(|r| r.metrics.final_avg).collect::<Vec<_>>())
    }

    pub fn final_avg_train(&self) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self.runs.iter().map(|r| r.final_avg_train).collect();
        v.map(|v| metrics::mean_and_stderr(&v))
    }

    fn optional(&self, f: impl Fn(&RunRecord) -> Option<f64>) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self.runs.iter().map(f).collect();
        v.map(|v| metrics::mean_and_stderr(&v))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_agg(v: Option<(f64, f64)>) -> String {
    v.map(|(m, se)| format!("{m}±{se}")).unwrap_or_default()
}

/// `seed,final_avg,bwt,fwt,final_avg_train` per seed, then an `aggregate`
/// row of `mean±stderr` cells.
pub fn write_metrics_csv<W: Write>(group: &GroupSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "final_avg", "bwt", "fwt", "final_avg_train"])?;
    for r in &group.runs {
        w.write_record([
            r.seed.to_string(),
            r.metrics.final_avg.to_string(),
            fmt_opt(r.metrics.bwt),
            fmt_opt(r.metrics.fwt),
            fmt_opt(r.final_avg_train),
        ])?;
    }
    w.write_record([
        "aggregate".to_string(),
        fmt_agg(Some(group.final_avg())),
        fmt_agg(group.optional(|r| r.metrics.bwt)),
        fmt_agg(group.optional(|r| r.metrics.fwt)),
        fmt_agg(group.final_avg_train()),
    ])?;
    w.flush()?;
    Ok(())
}

fn write_summary_csv<W: Write>(groups: &[GroupSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "memorable_per_task",
        "seeds",
        "final_avg_mean",
        "final_avg_se",
        "final_avg_train_mean",
        "final_avg_train_se",
    ])?;
    for g in groups {
        let (m, se) = g.final_avg();
        let tr = g.final_avg_train();
        w.write_record([
            g.variant.name().to_string(),
            g.memorable_per_task.to_string(),
            g.runs.len().to_string(),
            m.to_string(),
            se.to_string(),
            fmt_opt(tr.map(|t| t.0)),
            fmt_opt(tr.map(|t| t.1)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every (variant, memory size, seed) combination; seeds of one group
/// may run on `threads` workers. Results are ordered as configured.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: Option<&Path>,
    variant_sweep: bool,
    threads: usize,
) -> Result<Vec<GroupSummary>> {
    config.validate()?;
    let stream = config.benchmark.build()?;
    let variants: Vec<Variant> = if variant_sweep {
        Variant::ALL.to_vec()
    } else {
        vec![config.base_variant()]
    };
    let sizes = config.memory_sizes();
    let mut groups = Vec::new();
    for &variant in &variants {
        for &m in &sizes {
            let group_dir = out.map(|o| {
                let d = o.join(variant.name());
                if config.memory_sizes.is_some() {
                    d.join(format!("m{m}"))
                } else {
                    d
                }
            });
            let runs = run_seeds(config, &stream, variant, m, group_dir.as_deref(), threads)?;
            let group = GroupSummary {
                variant,
                memorable_per_task: m,
                runs,
            };
            if let Some(d) = &group_dir {
                fs::create_dir_all(d)?;
                write_metrics_csv(&group, BufWriter::new(File::create(d.join("metrics.csv"))?))?;
            }
            groups.push(group);
        }
    }
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        write_summary_csv(&groups, BufWriter::new(File::create(o.join("summary.csv"))?))?;
    }
    Ok(groups)
}

fn run_seeds(
    config: &ExperimentConfig,
    stream: &TaskStream,
    variant: Variant,
    memory: usize,
    dir: Option<&Path>,
    threads: usize,
) -> Result<Vec<RunRecord>> {
    let one = |seed: u64| {
        let seed_dir = dir.map(|d| d.join(format!("seed_{seed}")));
        run_seed(config, stream, variant, memory, seed, seed_dir.as_deref())
    };
    if threads <= 1 || config.seeds.len() == 1 {
        return config.seeds.iter().map(|&s| one(s)).collect();
    }
    let mut results: Vec<Option<Result<RunRecord>>> = (0..config.seeds.len()).map(|_| None).collect();
    for chunk in config.seeds.iter().enumerate().collect::<Vec<_>>().chunks(threads) {
        let done: Vec<(usize, Result<RunRecord>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(i, &seed)| (i, s.spawn(move || one(seed))))
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().expect("seed worker panicked")))
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every seed ran")).collect()
}

/// Result of an online boundary-detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRun {
    pub records: Vec<DetectionRecord>,
    pub summary: DetectionSummary,
}

/// Streams every task's minibatches without task labels through an online
/// FROMP learner and tests each minibatch for a task change. Needs a
/// single-head benchmark.
pub fn run_boundary_detection(config: &ExperimentConfig, seed: u64) -> Result<BoundaryRun> {
    config.validate()?;
    let stream = config.benchmark.build()?;
    if stream.head_widths.len() != 1 {
        return Err(Error::config("benchmark", "boundary detection needs a single-head benchmark"));
    }
    let bcfg = config.boundary.unwrap_or_default();
    let arch = arch_for(&stream, &config.network.hidden)?;
    let train_cfg = config.train_config(config.base_variant(), config.train.memorable_per_task, seed);
    let (batches, truth) = boundary::minibatch_stream(&stream, train_cfg.batch_size, train_cfg.epochs, seed);
    let n = stream.tasks[0].train.len();
    let classes = stream.tasks[0].train.class_count();
    let mut state = OnlineFromp::new(arch.clone(), train_cfg, 0, classes, n)?;
    let records = boundary::detect(&arch, 0, &batches, &mut state, bcfg)?;
    // A hit must land within the warmup window after the true change.
    let summary = boundary::summarize(&records, &truth, bcfg.warmup_iters.max(1));
    Ok(BoundaryRun { records, summary })
}

/// Resolved τ for a config and task size, for reporting.
pub fn describe_tau(tau: Tau, n: usize) -> String {
    match tau {
        Tau::TimesN { times_n } => format!("{times_n}N = {}", tau.resolve(n)),
        Tau::Absolute(t) => format!("{t}"),
    }
}

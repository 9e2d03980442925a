//! Datasets and task streams: IDX ingestion, permuted and split task
//! builders, a 2D toy generator and a synthetic glyph generator.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs (N×D) with integer labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.nrows(),
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: class_count,
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sorted list of labels that actually occur.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut seen = vec![false; self.class_count];
        for &y in &self.labels {
            seen[y] = true;
        }
        (0..self.class_count).filter(|&c| seen[c]).collect()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// The first `n` examples (or all of them if fewer).
    pub fn truncate(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Applies `perm` to the feature axis: new column `j` is old column `perm[j]`.
    pub fn permute_features(&self, perm: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select(Axis(1), perm),
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }

    /// Concatenates datasets with the same input dimension.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let views: Vec<_> = parts.iter().map(|d| d.inputs.view()).collect();
        let inputs = ndarray::concatenate(Axis(0), &views).map_err(|_| Error::DimensionMismatch {
            context: "concatenated input dimension",
            expected: first.dim(),
            got: parts.iter().map(|d| d.dim()).find(|&d| d != first.dim()).unwrap_or(0),
        })?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        let class_count = parts.iter().map(|d| d.class_count).max().unwrap_or(0);
        LabeledDataset::new(inputs, labels, class_count)
    }
}

/// One task of a continual-learning stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub head: usize,
    /// `class_map[local_label]` is the original class id.
    pub class_map: Vec<usize>,
}

/// Ordered tasks plus the output head widths they need.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub head_widths: Vec<usize>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }

    /// Keeps at most `n` training and `n_test` test examples per task.
    pub fn truncated(&self, n: usize, n_test: usize) -> TaskStream {
        TaskStream {
            tasks: self
                .tasks
                .iter()
                .map(|t| Task {
                    train: t.train.truncate(n),
                    test: t.test.truncate(n_test),
                    head: t.head,
                    class_map: t.class_map.clone(),
                })
                .collect(),
            head_widths: self.head_widths.clone(),
        }
    }
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile {
            path: path.to_path_buf(),
            needed: at + 4,
            found: bytes.len(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Parses an IDX image file (magic 0x803, three big-endian dimensions) into
/// an N×(rows·cols) matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let rows = read_be_u32(bytes, 8, path)? as usize;
    let cols = read_be_u32(bytes, 12, path)? as usize;
    let d = rows * cols;
    let needed = 16 + n * d;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Array2::from_shape_vec((n, d), pixels).expect("sizes checked"))
}

/// Parses an IDX label file (magic 0x801, one big-endian dimension).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair. Pixels are divided by 255 with no centering.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let inputs = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if inputs.nrows() != labels.len() {
        return Err(Error::CountMismatch {
            images: inputs.nrows(),
            labels: labels.len(),
        });
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(10);
    LabeledDataset::new(inputs, labels, class_count)
}

/// Standard MNIST file names inside `dir`: (train, test).
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Seeded feature permutations; the first is the identity.
pub fn task_permutations(dim: usize, tasks: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..tasks)
        .map(|t| {
            let mut perm: Vec<usize> = (0..dim).collect();
            if t > 0 {
                perm.shuffle(&mut rng);
            }
            perm
        })
        .collect()
}

/// `tasks` copies of the data under fixed pixel permutations, single head.
pub fn make_permuted_tasks(
    train: &LabeledDataset,
    test: &LabeledDataset,
    tasks: usize,
    seed: u64,
) -> Result<TaskStream> {
    if tasks == 0 {
        return Err(Error::config("tasks", "need at least one task"));
    }
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            context: "train/test input dimension",
            expected: train.dim(),
            got: test.dim(),
        });
    }
    let classes = train.class_count().max(test.class_count());
    let tasks = task_permutations(train.dim(), tasks, seed)
        .into_iter()
        .map(|perm| Task {
            train: train.permute_features(&perm),
            test: test.permute_features(&perm),
            head: 0,
            class_map: (0..classes).collect(),
        })
        .collect();
    Ok(TaskStream {
        tasks,
        head_widths: vec![classes],
    })
}

pub const DEFAULT_SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

fn split_filter(data: &LabeledDataset, a: usize, b: usize) -> Option<LabeledDataset> {
    let idx: Vec<usize> = (0..data.len())
        .filter(|&i| data.labels[i] == a || data.labels[i] == b)
        .collect();
    if idx.is_empty() {
        return None;
    }
    let mut sub = data.subset(&idx);
    sub.labels.iter_mut().for_each(|y| *y = usize::from(*y == b));
    sub.class_count = 2;
    Some(sub)
}

/// One binary task (and one sigmoid head) per class pair; labels become {0, 1}.
pub fn make_split_tasks(
    train: &LabeledDataset,
    test: &LabeledDataset,
    class_pairs: &[(usize, usize)],
) -> Result<TaskStream> {
    let mut used = Vec::new();
    for &(a, b) in class_pairs {
        for c in [a, b] {
            if used.contains(&c) {
                return Err(Error::config("class_pairs", format!("class {c} appears twice")));
            }
            used.push(c);
        }
    }
    let mut tasks = Vec::with_capacity(class_pairs.len());
    for (head, &(a, b)) in class_pairs.iter().enumerate() {
        let present = train.classes_present();
        for c in [a, b] {
            if !present.contains(&c) {
                return Err(Error::UnknownClass(c));
            }
        }
        let tr = split_filter(train, a, b).ok_or(Error::UnknownClass(a))?;
        let te = split_filter(test, a, b).ok_or(Error::UnknownClass(a))?;
        tasks.push(Task {
            train: tr,
            test: te,
            head,
            class_map: vec![a, b],
        });
    }
    Ok(TaskStream {
        head_widths: vec![1; tasks.len()],
        tasks,
    })
}

/// Geometry of the 2D toy benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub tasks: usize,
    pub per_task: usize,
    pub test_per_task: usize,
    /// Distance from the origin to the midpoint of each blob pair.
    pub radius: f64,
    /// Distance between the two class centres of a task.
    pub separation: f64,
    pub std: f64,
    /// Rotates the last task onto the first task's blobs with swapped classes,
    /// which makes the union of tasks non-separable.
    pub overlap_last: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            per_task: 4000,
            test_per_task: 1000,
            radius: 4.0,
            separation: 2.0,
            std: 0.35,
            overlap_last: false,
        }
    }
}

fn toy_points(
    rng: &mut ChaCha8Rng,
    count: usize,
    angle: f64,
    cfg: &ToyConfig,
    flip: bool,
) -> (Vec<f64>, Vec<usize>) {
    let noise = Normal::new(0.0, cfg.std).expect("non-negative std");
    let (sin, cos) = angle.sin_cos();
    let mut xs = Vec::with_capacity(2 * count);
    let mut ys = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        // Class 0 sits on the inner side, class 1 on the outer side.
        let r = cfg.radius + if label == 1 { 0.5 } else { -0.5 } * cfg.separation;
        xs.push(r * cos + noise.sample(rng));
        xs.push(r * sin + noise.sample(rng));
        ys.push(if flip { 1 - label } else { label });
    }
    (xs, ys)
}

/// Binary 2D blob pairs placed around the origin at angles 2πs/T.
pub fn make_toy_tasks_with(cfg: &ToyConfig, seed: u64) -> Result<TaskStream> {
    if cfg.per_task < 2 || cfg.test_per_task < 2 {
        return Err(Error::config("toy.per_task", "need at least two points per task"));
    }
    if cfg.tasks == 0 {
        return Err(Error::config("toy.tasks", "need at least one task"));
    }
    if !(cfg.std >= 0.0) {
        return Err(Error::config("toy.std", "must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for s in 0..cfg.tasks {
        let overlap = cfg.overlap_last && s + 1 == cfg.tasks && cfg.tasks > 1;
        let angle = if overlap {
            0.0
        } else {
            2.0 * std::f64::consts::PI * s as f64 / cfg.tasks as f64
        };
        let (xs, ys) = toy_points(&mut rng, cfg.per_task, angle, cfg, overlap);
        let (txs, tys) = toy_points(&mut rng, cfg.test_per_task, angle, cfg, overlap);
        let train = LabeledDataset::new(
            Array2::from_shape_vec((cfg.per_task, 2), xs).expect("2D points"),
            ys,
            2,
        )?;
        let test = LabeledDataset::new(
            Array2::from_shape_vec((cfg.test_per_task, 2), txs).expect("2D points"),
            tys,
            2,
        )?;
        tasks.push(Task {
            train,
            test,
            head: 0,
            class_map: vec![0, 1],
        });
    }
    Ok(TaskStream {
        tasks,
        head_widths: vec![1],
    })
}

/// Five-task toy stream with `per_task` training points per task.
pub fn make_toy_tasks(seed: u64, per_task: usize) -> Result<TaskStream> {
    make_toy_tasks_with(
        &ToyConfig {
            per_task,
            ..ToyConfig::default()
        },
        seed,
    )
}

/// Writes a 2D stream as CSV with header `task,split,x0,x1,label`.
pub fn write_toy_csv<W: Write>(stream: &TaskStream, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["task", "split", "x0", "x1", "label"])?;
    for (t, task) in stream.tasks.iter().enumerate() {
        for (split, data) in [("train", &task.train), ("test", &task.test)] {
            if data.dim() != 2 {
                return Err(Error::DimensionMismatch {
                    context: "toy CSV needs 2D inputs",
                    expected: 2,
                    got: data.dim(),
                });
            }
            for i in 0..data.len() {
                let x = data.input(i);
                // `{}` on f64 prints the shortest string that round-trips exactly.
                wtr.write_record(&[
                    t.to_string(),
                    split.to_string(),
                    format!("{}", x[0]),
                    format!("{}", x[1]),
                    data.labels[i].to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct ToyRow {
    task: usize,
    split: String,
    x0: f64,
    x1: f64,
    label: usize,
}

/// Reads a stream written by [`write_toy_csv`] (single binary head).
pub fn read_toy_csv<R: Read>(input: R) -> Result<TaskStream> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut parts: Vec<[(Vec<f64>, Vec<usize>); 2]> = Vec::new();
    for row in rdr.deserialize() {
        let row: ToyRow = row?;
        let which = match row.split.as_str() {
            "train" => 0,
            "test" => 1,
            other => return Err(Error::config("split", format!("unknown split `{other}`"))),
        };
        while parts.len() <= row.task {
            parts.push(Default::default());
        }
        let (xs, ys) = &mut parts[row.task][which];
        xs.extend([row.x0, row.x1]);
        ys.push(row.label);
    }
    let mut tasks = Vec::with_capacity(parts.len());
    for [(xs, ys), (txs, tys)] in parts {
        let n = ys.len();
        let tn = tys.len();
        tasks.push(Task {
            train: LabeledDataset::new(
                Array2::from_shape_vec((n, 2), xs).expect("pairs"),
                ys,
                2,
            )?,
            test: LabeledDataset::new(
                Array2::from_shape_vec((tn, 2), txs).expect("pairs"),
                tys,
                2,
            )?,
            head: 0,
            class_map: vec![0, 1],
        });
    }
    Ok(TaskStream {
        tasks,
        head_widths: vec![1],
    })
}

/// Shape of the synthetic glyph data used for small permuted streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fraction of "on" pixels in each class prototype.
    pub density: f64,
    pub noise: f64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            train_per_class: 200,
            test_per_class: 50,
            density: 0.3,
            noise: 0.25,
        }
    }
}

/// Noisy binary prototypes in `[0,1]^dim`, one per class: a stand-in for
/// small images when real digits are not at hand.
pub fn make_glyph_dataset(
    cfg: &GlyphConfig,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if cfg.classes < 2 || cfg.dim == 0 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::config("glyph", "classes ≥ 2 and non-empty sizes required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| if rng.random::<f64>() < cfg.density { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise).map_err(|_| Error::config("glyph.noise", "invalid"))?;
    let sample = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<LabeledDataset> {
        let n = per_class * cfg.classes;
        let mut xs = Vec::with_capacity(n * cfg.dim);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % cfg.classes;
            for &p in &prototypes[c] {
                xs.push((p + noise.sample(rng)).clamp(0.0, 1.0));
            }
            ys.push(c);
        }
        LabeledDataset::new(
            Array2::from_shape_vec((n, cfg.dim), xs).expect("sizes"),
            ys,
            cfg.classes,
        )
    };
    let train = sample(cfg.train_per_class, &mut rng)?;
    let test = sample(cfg.test_per_class, &mut rng)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, rows, cols] {
            b.extend(d.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn parses_idx_header() {
        let bytes = idx_images(2, 28, 28, 255);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let x = parse_idx_images(&bytes, Path::new("mem")).unwrap();
        assert_eq!(x.dim(), (2, 784));
        assert!(x.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = idx_images(1, 2, 2, 0);
        bytes[3] = 2;
        assert!(matches!(
            parse_idx_images(&bytes, Path::new("x")),
            Err(Error::BadMagic { found: 0x802, .. })
        ));
        let bytes = idx_images(3, 2, 2, 0);
        assert!(matches!(
            parse_idx_images(&bytes[..bytes.len() - 1], Path::new("x")),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(
            parse_idx_labels(&idx_images(1, 1, 1, 0), Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            parse_idx_labels(&[0, 0, 8], Path::new("x")),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn load_idx_checks_counts() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, idx_images(3, 2, 2, 51)).unwrap();
        fs::write(&lab, idx_labels(&[1, 2])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::CountMismatch { images: 3, labels: 2 })));
        fs::write(&lab, idx_labels(&[1, 2, 9])).unwrap();
        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.labels(), &[1, 2, 9]);
        assert!((d.input(0)[0] - 0.2).abs() < 1e-15);
    }

    fn tiny_digits() -> (LabeledDataset, LabeledDataset) {
        let n = 40;
        let inputs = Array2::from_shape_fn((n, 6), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        let labels = (0..n).map(|i| i % 10).collect();
        let train = LabeledDataset::new(inputs, labels, 10).unwrap();
        let test = train.truncate(20);
        (train, test)
    }

    #[test]
    fn permuted_tasks() {
        let (train, test) = tiny_digits();
        let one = make_permuted_tasks(&train, &test, 1, 3).unwrap();
        assert_eq!(one.tasks[0].train, train);
        assert_eq!(one.tasks[0].test, test);
        let a = make_permuted_tasks(&train, &test, 4, 3).unwrap();
        assert_eq!(a, make_permuted_tasks(&train, &test, 4, 3).unwrap());
        assert_eq!(a.head_widths, vec![10]);
        for perm in task_permutations(784, 5, 9) {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..784).collect::<Vec<_>>());
        }
        // Train and test share the permutation.
        let perms = task_permutations(6, 4, 3);
        assert_eq!(a.tasks[2].train.input(5)[0], train.input(5)[perms[2][0]]);
        assert_eq!(a.tasks[2].test.input(5)[0], test.input(5)[perms[2][0]]);
    }

    #[test]
    fn split_tasks() {
        let (train, test) = tiny_digits();
        let one = make_split_tasks(&train, &test, &[(0, 1)]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.tasks[0].train.len(), 8);
        assert_eq!(one.tasks[0].class_map, vec![0, 1]);
        let all = make_split_tasks(&train, &test, &DEFAULT_SPLIT_PAIRS).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all.head_widths, vec![1; 5]);
        let mut total = 0;
        for (h, task) in all.tasks.iter().enumerate() {
            assert_eq!(task.head, h);
            assert!(task.train.labels().iter().all(|&y| y < 2));
            assert_eq!(task.train.classes_present(), vec![0, 1]);
            total += task.train.len();
        }
        assert_eq!(total, train.len());
        assert!(matches!(
            make_split_tasks(&train, &test, &[(0, 12)]),
            Err(Error::UnknownClass(12))
        ));
        assert!(make_split_tasks(&train, &test, &[(0, 1), (1, 2)]).is_err());
    }

    #[test]
    fn toy_tasks_shape_and_geometry() {
        let s = make_toy_tasks(4, 400).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.tasks.iter().all(|t| t.train.len() == 400 && t.head == 0));
        assert_eq!(s, make_toy_tasks(4, 400).unwrap());
        assert_ne!(s, make_toy_tasks(5, 400).unwrap());

        // Class-conditional means are `separation` apart (checked on a large sample).
        let big = make_toy_tasks(1, 20000).unwrap();
        for task in &big.tasks {
            let mut means = [[0.0; 2]; 2];
            let mut counts = [0.0; 2];
            for i in 0..task.train.len() {
                let y = task.train.labels()[i];
                counts[y] += 1.0;
                means[y][0] += task.train.input(i)[0];
                means[y][1] += task.train.input(i)[1];
            }
            let d = ((means[0][0] / counts[0] - means[1][0] / counts[1]).powi(2)
                + (means[0][1] / counts[0] - means[1][1] / counts[1]).powi(2))
            .sqrt();
            assert!((d - 2.0).abs() < 0.02, "separation {d}");
        }
    }

    #[test]
    fn toy_csv_round_trip() {
        let s = make_toy_tasks(8, 50).unwrap();
        let mut buf = Vec::new();
        write_toy_csv(&s, &mut buf).unwrap();
        assert!(buf.starts_with(b"task,split,x0,x1,label\n"));
        let back = read_toy_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), s.len());
        for (a, b) in s.tasks.iter().zip(&back.tasks) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.test, b.test);
        }
    }

    #[test]
    fn glyphs_are_seeded_and_bounded() {
        let cfg = GlyphConfig::default();
        let (a, b) = make_glyph_dataset(&cfg, 2).unwrap();
        assert_eq!(a.len(), 2000);
        assert_eq!(b.len(), 500);
        assert!(a.inputs().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(make_glyph_dataset(&cfg, 2).unwrap().0, a);
    }
}

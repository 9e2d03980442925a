//! Accuracy matrices and the continual-learning summary metrics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `R[i][j]`: accuracy on task `j` after training task `i`. Cells with `j > i`
/// are only filled when forward evaluation is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            cells: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let t = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != t {
                return Err(Error::DimensionMismatch {
                    context: "accuracy matrix row length",
                    expected: t,
                    got: r.len(),
                });
            }
            if let Some(v) = r.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::IncompleteMatrix(format!("row {i} has out-of-range value {v}")));
            }
        }
        Ok(Self { cells: rows })
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.cells[after][task]
    }

    pub fn set(&mut self, after: usize, task: usize, acc: f64) {
        self.cells[after][task] = Some(acc);
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.cells
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.cells[i][j].ok_or_else(|| Error::IncompleteMatrix(format!("missing R[{i}][{j}]")))
    }

    /// CSV with header `after_task,task_0,..`; empty cells are unevaluated.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["after_task".to_string()];
        header.extend((0..self.tasks()).map(|j| format!("task_{j}")));
        w.write_record(&header)?;
        for (i, row) in self.cells.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::new();
            for field in rec.iter().skip(1) {
                row.push(parse_cell(field, i)?);
            }
            rows.push(row);
        }
        Self::from_rows(rows)
    }
}

fn parse_cell(field: &str, row: usize) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::IncompleteMatrix(format!("row {row}: cannot parse {field:?}")))
}

/// Mean of the last row.
pub fn final_average(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t == 0 {
        return Err(Error::IncompleteMatrix("no tasks".into()));
    }
    let mut sum = 0.0;
    for j in 0..t {
        sum += r.require(t - 1, j)?;
    }
    Ok(sum / t as f64)
}

/// `(1/(T−1)) Σ_{i<T} R[T][i] − R[i][i]`; negative means forgetting.
pub fn backward_transfer(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::SingleTask);
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += r.require(t - 1, i)? - r.require(i, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// `(1/(T−1)) Σ_{i≥2} R[i][i] − R_ind[i]` against independently trained models.
pub fn forward_transfer(r: &AccuracyMatrix, independent: Option<&[f64]>) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::SingleTask);
    }
    let ind = independent.ok_or(Error::MissingIndependentRuns)?;
    if ind.len() != t {
        return Err(Error::MissingIndependentRuns);
    }
    let mut sum = 0.0;
    for i in 1..t {
        sum += r.require(i, i)? - ind[i];
    }
    Ok(sum / (t - 1) as f64)
}

/// CSV `task,accuracy` of single-task accuracies.
pub fn write_independent_csv<W: Write>(acc: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "accuracy"])?;
    for (i, a) in acc.iter().enumerate() {
        w.write_record([i.to_string(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_independent_csv<R: Read>(input: R) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Row {
        task: usize,
        accuracy: f64,
    }
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let row: Row = rec?;
        if row.task != out.len() {
            return Err(Error::IncompleteMatrix(format!(
                "independent accuracies out of order at task {}",
                row.task
            )));
        }
        out.push(row.accuracy);
    }
    Ok(out)
}

/// Sample mean and standard error (0 for a single value).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Summary metrics of one matrix; BWT and FWT are absent when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub final_avg: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
}

pub fn compute_metrics(r: &AccuracyMatrix, independent: Option<&[f64]>) -> Result<Metrics> {
    let final_avg = final_average(r)?;
    let bwt = match backward_transfer(r) {
        Ok(v) => Some(v),
        Err(Error::SingleTask) => None,
        Err(e) => return Err(e),
    };
    let fwt = match forward_transfer(r, independent) {
        Ok(v) => Some(v),
        Err(Error::SingleTask | Error::MissingIndependentRuns) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics { final_avg, bwt, fwt })
}

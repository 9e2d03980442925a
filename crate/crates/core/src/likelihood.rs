//! Link functions, cross-entropy losses and the output-space Hessian Λ.
//!
//! A head with a single logit is a Bernoulli/sigmoid head; a head with K ≥ 2
//! logits is a softmax head. Multiclass quantities use all K outputs.

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^f)` without overflow.
pub fn softplus(f: f64) -> f64 {
    if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

fn log_sum_exp(f: &[f64]) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Number of classes a head with `width` logits predicts.
pub fn class_count(width: usize) -> usize {
    if width == 1 {
        2
    } else {
        width
    }
}

/// Sigmoid for one logit, softmax otherwise.
pub fn link(f: &[f64]) -> Vec<f64> {
    match f {
        [single] => vec![sigmoid(*single)],
        _ => softmax(f),
    }
}

fn check_label(y: usize, width: usize) -> Result<()> {
    let classes = class_count(width);
    if y >= classes {
        return Err(Error::InvalidLabel { label: y, classes });
    }
    Ok(())
}

/// Cross-entropy of label `y` under logits `f`.
pub fn loss(y: usize, f: &[f64]) -> Result<f64> {
    check_label(y, f.len())?;
    Ok(match f {
        // −y log σ(f) − (1−y) log(1−σ(f)) = log(1+e^f) − y f
        [single] => softplus(*single) - if y == 1 { *single } else { 0.0 },
        _ => log_sum_exp(f) - f[y],
    })
}

/// ∂loss/∂f: `σ(f) − y` or `S(f) − e_y`.
pub fn loss_derivative(y: usize, f: &[f64]) -> Result<Vec<f64>> {
    check_label(y, f.len())?;
    let mut p = link(f);
    match f.len() {
        1 => p[0] -= y as f64,
        _ => p[y] -= 1.0,
    }
    Ok(p)
}

/// Output-space Hessian of the loss, which doubles as the GP noise precision.
#[derive(Debug, Clone, PartialEq)]
pub enum NoisePrecision {
    Scalar(f64),
    Matrix(Array2<f64>),
}

impl NoisePrecision {
    pub fn trace(&self) -> f64 {
        match self {
            NoisePrecision::Scalar(l) => *l,
            NoisePrecision::Matrix(m) => m.diag().sum(),
        }
    }

    /// Row `k` of Λ (for a scalar head, `[λ]`).
    pub fn row(&self, k: usize) -> Vec<f64> {
        match self {
            NoisePrecision::Scalar(l) => vec![*l],
            NoisePrecision::Matrix(m) => m.row(k).to_vec(),
        }
    }
}

/// Binary λ = σ(f)(1−σ(f)); multiclass Λ = Diag(S) − S Sᵀ.
pub fn noise_precision(f: &[f64]) -> NoisePrecision {
    match f {
        // σ(f)σ(−f) is exactly even in f and underflows cleanly to 0.
        [single] => NoisePrecision::Scalar(sigmoid(*single) * sigmoid(-*single)),
        _ => {
            let s = softmax(f);
            let k = s.len();
            let mut m = Array2::zeros((k, k));
            for i in 0..k {
                for j in 0..k {
                    m[[i, j]] = if i == j { s[i] - s[i] * s[j] } else { -s[i] * s[j] };
                }
            }
            NoisePrecision::Matrix(m)
        }
    }
}

/// Memorability score: λ for binary heads, Tr(Λ) for softmax heads.
pub fn relevance(f: &[f64]) -> f64 {
    match f {
        [single] => sigmoid(*single) * sigmoid(-*single),
        _ => {
            let s = softmax(f);
            s.iter().map(|p| p - p * p).sum()
        }
    }
}

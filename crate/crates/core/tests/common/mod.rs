//! Oracles shared by the integration tests: finite differences, a naive
//! forward pass, a Jacobi eigen-solver and random small networks.

#![allow(dead_code)]

use fromp::gp::{self, SnapshotRequest};
use fromp::memory::{MemorableSet, SelectionStrategy};
use fromp::network::{FlatWeights, MlpArch};
use fromp::trainer::{BankEntry, TaskMemoryBank};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central differences of a scalar function of the weights.
pub fn fd_gradient(w: &FlatWeights, h: f64, mut f: impl FnMut(&FlatWeights) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.len());
    let mut probe = w.clone();
    for p in 0..w.len() {
        let base = w.as_slice()[p];
        probe.as_mut_slice()[p] = base + h;
        let up = f(&probe);
        probe.as_mut_slice()[p] = base - h;
        let down = f(&probe);
        probe.as_mut_slice()[p] = base;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Straight-loop forward pass over the documented flat layout: each layer
/// stores its weights row-major `[fan_out][fan_in]` followed by the biases;
/// trunk layers first, then heads in order.
pub fn naive_forward(arch: &MlpArch, w: &[f64], x: &[f64], head: usize) -> Vec<f64> {
    let mut offset = 0;
    let mut a = x.to_vec();
    let mut fan_in = arch.input_dim();
    for &width in arch.hidden() {
        let mut z = vec![0.0; width];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut s = w[offset + width * fan_in + o];
            for i in 0..fan_in {
                s += w[offset + o * fan_in + i] * a[i];
            }
            *zo = s.max(0.0);
        }
        offset += width * fan_in + width;
        fan_in = width;
        a = z;
    }
    for (h, &width) in arch.heads().iter().enumerate() {
        if h == head {
            return (0..width)
                .map(|o| {
                    let mut s = w[offset + width * fan_in + o];
                    for i in 0..fan_in {
                        s += w[offset + o * fan_in + i] * a[i];
                    }
                    s
                })
                .collect();
        }
        offset += width * fan_in + width;
    }
    panic!("no head {head}");
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        let scale: f64 = m.iter().map(|v| v * v).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[[i, i]]).collect()
}

/// A random MLP with at most `max_params` parameters.
pub fn random_arch(rng: &mut ChaCha8Rng, max_params: usize) -> MlpArch {
    loop {
        let input = rng.random_range(1..=5);
        let depth = rng.random_range(0..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=10)).collect();
        let heads: Vec<usize> = (0..rng.random_range(1..=2))
            .map(|_| [1, 2, 3, 4][rng.random_range(0..4)])
            .collect();
        let arch = MlpArch::new(input, hidden, heads).expect("valid shape");
        if arch.param_count() <= max_params {
            return arch;
        }
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng, arch: &MlpArch, scale: f64) -> FlatWeights {
    FlatWeights::from_vec(
        (0..arch.param_count())
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
}

pub fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
}

/// Sigmoid or softmax written out directly.
pub fn probabilities(f: &[f64]) -> Vec<f64> {
    if f.len() == 1 {
        vec![1.0 / (1.0 + (-f[0]).exp())]
    } else {
        let mx = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = f.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }
}

/// Jacobian of [`probabilities`] with respect to the logits.
pub fn link_jacobian(f: &[f64]) -> Array2<f64> {
    let p = probabilities(f);
    if f.len() == 1 {
        return Array2::from_elem((1, 1), p[0] * (1.0 - p[0]));
    }
    let k = f.len();
    Array2::from_shape_fn((k, k), |(a, b)| {
        if a == b {
            p[a] * (1.0 - p[a])
        } else {
            -p[a] * p[b]
        }
    })
}

/// Bank holding one frozen snapshot of `inputs` at `w`.
pub fn single_task_bank(arch: &MlpArch, w: &FlatWeights, variance: &[f64], inputs: &Array2<f64>, head: usize) -> TaskMemoryBank {
    let width = arch.head_width(head).unwrap();
    let classes: Vec<usize> = if width == 1 { vec![0] } else { (0..width).collect() };
    let snapshot = gp::snapshot_task(
        arch,
        w,
        variance,
        SnapshotRequest {
            task: 0,
            head,
            inputs: inputs.view(),
            classes: &classes,
        },
    )
    .unwrap();
    TaskMemoryBank {
        entries: vec![BankEntry {
            memorable: MemorableSet {
                task: 0,
                indices: (0..inputs.nrows()).collect(),
                inputs: inputs.clone(),
                strategy: SelectionStrategy::TopRelevance,
                seed: 0,
            },
            snapshot,
        }],
    }
}

//! Dense symmetric positive-definite factorization and solves.
//!
//! Kernel matrices over memorable points are small (M×M with M in the tens
//! to hundreds), so a plain row-major Cholesky is all that is needed. Nearby
//! memorable inputs make those matrices close to singular, which is handled by
//! escalating a diagonal jitter.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit reals.
pub type DenseMatrix = Array2<f64>;

/// Number of ×10 escalations tried after the base jitter.
pub const JITTER_STEPS: i32 = 6;

const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular Cholesky factor of `A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    lower: DenseMatrix,
    jitter: f64,
}

impl SpdFactor {
    pub fn lower(&self) -> ArrayView2<'_, f64> {
        self.lower.view()
    }

    /// Diagonal shift that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Rebuilds a factor from a stored lower triangle (checkpoint loading).
    pub fn from_parts(lower: DenseMatrix, jitter: f64) -> Result<Self> {
        if lower.nrows() != lower.ncols() {
            return Err(Error::DimensionMismatch {
                context: "factor must be square",
                expected: lower.nrows(),
                got: lower.ncols(),
            });
        }
        if lower.diag().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Checkpoint("factor diagonal must be positive".into()));
        }
        Ok(Self { lower, jitter })
    }

    /// Solves `(A + jI) x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch {
                context: "right-hand side length",
                expected: n,
                got: b.len(),
            });
        }
        let mut x = b.to_owned();
        self.solve_in_place(x.as_slice_mut().expect("owned array is contiguous"));
        Ok(x)
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        let l = &self.lower;
        // L y = b
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= l[[i, k]] * x[k];
            }
            x[i] = s / l[[i, i]];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[[k, i]] * x[k];
            }
            x[i] = s / l[[i, i]];
        }
    }

    /// `L Lᵀ`, i.e. the jittered matrix that was factored.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.lower.dot(&self.lower.t())
    }
}

fn max_abs(a: &ArrayView2<'_, f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Plain Cholesky of `a + jitter·I`; `None` on a non-positive pivot.
fn cholesky(a: &ArrayView2<'_, f64>, jitter: f64) -> Option<DenseMatrix> {
    let n = a.nrows();
    let mut l = DenseMatrix::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]] + jitter;
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Factors `a + j·I` for the smallest `j` in `base_jitter·10^k`, `k = 0..=6`,
/// that yields a positive-definite matrix.
pub fn spd_factor(a: ArrayView2<'_, f64>, base_jitter: f64) -> Result<SpdFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "matrix must be square",
            expected: n,
            got: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix to factor"));
    }
    let scale = 1.0_f64.max(max_abs(&a));
    let mut max_asymmetry = 0.0_f64;
    for i in 0..n {
        for j in 0..i {
            max_asymmetry = max_asymmetry.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if max_asymmetry > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { max_asymmetry });
    }
    let base_jitter = base_jitter.max(0.0);
    let mut jitter = base_jitter;
    for step in 0..=JITTER_STEPS {
        jitter = base_jitter * 10f64.powi(step);
        if let Some(lower) = cholesky(&a, jitter) {
            return Ok(SpdFactor { lower, jitter });
        }
        if base_jitter == 0.0 {
            break;
        }
    }
    Err(Error::FactorizationFailed {
        last_jitter: jitter,
    })
}

/// Solves `(A + jI) X = B` column by column.
pub fn spd_solve(factor: &SpdFactor, b: ArrayView2<'_, f64>) -> Result<DenseMatrix> {
    let n = factor.dim();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "right-hand side rows",
            expected: n,
            got: b.nrows(),
        });
    }
    let mut x = DenseMatrix::zeros(b.raw_dim());
    let mut col = vec![0.0; n];
    for j in 0..b.ncols() {
        for (c, v) in col.iter_mut().zip(b.column(j)) {
            *c = *v;
        }
        factor.solve_in_place(&mut col);
        for (dst, v) in x.column_mut(j).iter_mut().zip(&col) {
            *dst = *v;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn identity_factors_to_identity() {
        let f = spd_factor(DenseMatrix::eye(3).view(), 0.0).unwrap();
        assert_eq!(f.lower(), DenseMatrix::eye(3));
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn two_by_two_hand_cholesky() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let f = spd_factor(a.view(), 0.0).unwrap();
        let l = f.lower();
        assert_abs_diff_eq!(l[[0, 0]], 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(l[[1, 0]], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(l[[1, 1]], 1.5f64.sqrt(), epsilon = 1e-15);
        assert_eq!(l[[0, 1]], 0.0);
        let err = (&f.reconstruct() - &a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-8 * 3.0);
    }

    #[test]
    fn singular_matrix_needs_jitter() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            spd_factor(a.view(), 0.0),
            Err(Error::FactorizationFailed { .. })
        ));
        let f = spd_factor(a.view(), 1e-6).unwrap();
        assert!(f.jitter() >= 1e-6);
        assert!(f.lower().diag().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn negative_definite_exhausts_ladder() {
        let a = array![[-1.0, 0.0], [0.0, -1.0]];
        match spd_factor(a.view(), 1e-9) {
            Err(Error::FactorizationFailed { last_jitter }) => {
                assert!((last_jitter - 1e-3).abs() < 1e-15)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let a = array![[2.0, 1.0], [0.5, 2.0]];
        assert!(matches!(spd_factor(a.view(), 0.0), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn solves_small_systems() {
        let b = array![[1.0, -2.0], [3.0, 0.5], [0.0, 7.0]];
        let f = spd_factor(DenseMatrix::eye(3).view(), 0.0).unwrap();
        assert_eq!(spd_solve(&f, b.view()).unwrap(), b);

        let f = spd_factor(array![[2.0, 1.0], [1.0, 2.0]].view(), 0.0).unwrap();
        let x = spd_solve(&f, array![[1.0], [0.0]].view()).unwrap();
        assert_abs_diff_eq!(x[[0, 0]], 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[[1, 0]], -1.0 / 3.0, epsilon = 1e-14);

        let f = spd_factor(array![[4.0]].view(), 0.0).unwrap();
        let x = spd_solve(&f, array![[8.0]].view()).unwrap();
        assert_eq!(x[[0, 0]], 2.0);
    }

    #[test]
    fn solve_rejects_wrong_rows() {
        let f = spd_factor(DenseMatrix::eye(3).view(), 0.0).unwrap();
        assert!(matches!(
            spd_solve(&f, DenseMatrix::zeros((2, 1)).view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn random_spd(n: usize, entries: &[f64]) -> DenseMatrix {
        // A = B Bᵀ / n + 1e-3 I has eigenvalues ≥ 1e-3.
        let b = DenseMatrix::from_shape_vec((n, n), entries[..n * n].to_vec()).unwrap();
        let mut a = b.dot(&b.t()) / n as f64;
        for i in 0..n {
            a[[i, i]] += 1e-3;
        }
        // Symmetrize exactly.
        let at = a.t().to_owned();
        (a + at) / 2.0
    }

    proptest! {
        #[test]
        fn recovers_solution_of_random_spd(
            n in 1usize..12,
            entries in prop::collection::vec(-2.0f64..2.0, 144),
            xs in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let a = random_spd(n, &entries);
            let x = Array1::from(xs[..n].to_vec());
            let b = a.dot(&x).insert_axis(ndarray::Axis(1));
            let f = spd_factor(a.view(), 0.0).unwrap();
            let recon_err = (&f.reconstruct() - &a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(recon_err <= 1e-8 * (1.0 + max_abs(&a.view())));
            let solved = spd_solve(&f, b.view()).unwrap();
            let num: f64 = solved.column(0).iter().zip(&x).map(|(s, t)| (s - t).powi(2)).sum::<f64>().sqrt();
            let den: f64 = x.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-300);
            prop_assert!(num / den <= 1e-7, "relative error {}", num / den);
            // Deterministic, bit for bit.
            prop_assert_eq!(f, spd_factor(a.view(), 0.0).unwrap());
        }
    }
}

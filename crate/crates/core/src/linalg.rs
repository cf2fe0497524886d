//! Symmetric positive semidefinite solves by pivoted Cholesky.
//!
//! The matrix is equilibrated to unit diagonal first so the rank tolerance is
//! scale free. Columns that never become pivots are reported as deficient.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Pivots below this fraction of the unit diagonal end the factorization.
pub const RANK_TOL: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is rank deficient; dependent columns {0:?}")]
    RankDeficient(Vec<usize>),
    #[error("matrix is not square or has non-finite entries")]
    Invalid,
}

/// `Pᵀ D A D P = L Lᵀ` with `D` the equilibrating diagonal.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    l: DMatrix<f64>,
    piv: Vec<usize>,
    scale: Vec<f64>,
    rank: usize,
}

impl PivotedCholesky {
    pub fn new(a: &DMatrix<f64>) -> Result<Self, LinalgError> {
        let n = a.nrows();
        if a.ncols() != n || a.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Invalid);
        }
        let scale: Vec<f64> = (0..n)
            .map(|i| {
                let d = a[(i, i)];
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut w = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
        let mut piv: Vec<usize> = (0..n).collect();
        let mut rank = n;
        for k in 0..n {
            let (mut jmax, mut dmax) = (k, w[(k, k)]);
            for j in k + 1..n {
                if w[(j, j)] > dmax {
                    jmax = j;
                    dmax = w[(j, j)];
                }
            }
            if !(dmax > RANK_TOL) {
                rank = k;
                break;
            }
            if jmax != k {
                w.swap_rows(k, jmax);
                w.swap_columns(k, jmax);
                piv.swap(k, jmax);
            }
            let d = w[(k, k)].sqrt();
            w[(k, k)] = d;
            for i in k + 1..n {
                w[(i, k)] /= d;
            }
            for j in k + 1..n {
                let ljk = w[(j, k)];
                for i in j..n {
                    let v = w[(i, j)] - w[(i, k)] * ljk;
                    w[(i, j)] = v;
                }
            }
            for j in k + 1..n {
                for i in j + 1..n {
                    w[(j, i)] = w[(i, j)];
                }
            }
        }
        let l = DMatrix::from_fn(n, rank, |i, j| if i >= j { w[(i, j)] } else { 0.0 });
        Ok(PivotedCholesky {
            l,
            piv,
            scale,
            rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.piv.len()
    }

    /// Original indices of columns left out of the factor, sorted.
    pub fn deficient(&self) -> Vec<usize> {
        let mut d = self.piv[self.rank..].to_vec();
        d.sort_unstable();
        d
    }

    pub fn check_full_rank(&self) -> Result<(), LinalgError> {
        if self.rank == self.dim() {
            Ok(())
        } else {
            Err(LinalgError::RankDeficient(self.deficient()))
        }
    }

    /// Solve `A x = b`. Deficient coordinates are set to zero.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let r = self.rank;
        // y = Pᵀ D b restricted to the leading block.
        let mut y = DVector::from_fn(r, |i, _| b[self.piv[i]] * self.scale[self.piv[i]]);
        let lr = self.l.rows(0, r);
        for i in 0..r {
            let mut s = y[i];
            for k in 0..i {
                s -= lr[(i, k)] * y[k];
            }
            y[i] = s / lr[(i, i)];
        }
        for i in (0..r).rev() {
            let mut s = y[i];
            for k in i + 1..r {
                s -= lr[(k, i)] * y[k];
            }
            y[i] = s / lr[(i, i)];
        }
        let mut x = DVector::zeros(self.dim());
        for i in 0..r {
            let j = self.piv[i];
            x[j] = y[i] * self.scale[j];
        }
        x
    }

    /// `A⁻¹`, or the inverse on the non-deficient block padded with zeros.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        // Symmetrize away rounding.
        (&inv + inv.transpose()) * 0.5
    }
}

/// Least-squares coefficients of `y` on the columns of `x`.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    let xtx = x.tr_mul(x);
    let ch = PivotedCholesky::new(&xtx)?;
    ch.check_full_rank()?;
    Ok(ch.solve(&x.tr_mul(y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd() -> DMatrix<f64> {
        let b = DMatrix::from_row_slice(
            4,
            3,
            &[
                1.0, 2.0, 0.5, -1.0, 0.3, 2.0, 0.7, -0.2, 1.1, 3.0, 1.0, -1.0,
            ],
        );
        b.tr_mul(&b) + DMatrix::identity(3, 3) * 0.1
    }

    #[test]
    fn solve_matches_lu() {
        let a = spd();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = PivotedCholesky::new(&a).unwrap().solve(&b);
        let oracle = a.clone().lu().solve(&b).unwrap();
        assert!((x - oracle).amax() < 1e-12);
    }

    #[test]
    fn inverse_of_spd() {
        let a = spd();
        let inv = PivotedCholesky::new(&a).unwrap().inverse();
        assert!((&a * inv - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_reported() {
        let x = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 2.0, 2.0, 1.0, -1.0, -1.0, 1.0, 0.5, 0.5, 1.0, 3.0, 3.0],
        );
        let ch = PivotedCholesky::new(&x.tr_mul(&x)).unwrap();
        assert_eq!(ch.rank(), 2);
        assert_eq!(ch.deficient().len(), 1);
        assert!(ch.deficient()[0] == 1 || ch.deficient()[0] == 2);
        assert!(matches!(
            ch.check_full_rank(),
            Err(LinalgError::RankDeficient(_))
        ));
    }

    #[test]
    fn zero_column_is_deficient() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let ch = PivotedCholesky::new(&a).unwrap();
        assert_eq!(ch.deficient(), vec![1]);
        let x = ch.solve(&DVector::from_vec(vec![4.0, 1.0]));
        assert!((x[0] - 2.0).abs() < 1e-15);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn badly_scaled_but_full_rank() {
        let a = DMatrix::from_row_slice(2, 2, &[1e12, 1.0, 1.0, 1e-6]);
        let ch = PivotedCholesky::new(&a).unwrap();
        assert_eq!(ch.rank(), 2);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let x = ch.solve(&b);
        assert!(((&a * x) - b).amax() < 1e-9);
    }
}

//! Small dense linear-algebra helpers shared by the estimator and projection.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// `(A + Aᵀ) / 2`.
pub fn sym_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue_sym(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)];
    }
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Non-negative least squares `min ‖E μ − f‖` subject to `μ ≥ 0`
/// (Lawson–Hanson active set). Returns `μ`.
pub fn nnls(e: &DMatrix<f64>, f: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let n = e.ncols();
    let mut mu = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = e.iter().fold(0.0f64, |a, v| a.max(v.abs())) * f.norm().max(1.0);
    let tol = 1e-13 * scale.max(1e-300);
    let mut w = e.transpose() * (f - e * &mu);
    for _ in 0..max_iter {
        let pick = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = pick else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = e.select_columns(&idx);
            let z = sub
                .svd(true, true)
                .solve(f, 1e-14)
                .expect("svd was computed with both factors");
            if z.iter().all(|&v| v > 0.0) {
                mu.fill(0.0);
                for (pos, &k) in idx.iter().enumerate() {
                    mu[k] = z[pos];
                }
                break;
            }
            // Step back to the boundary and drop the variables that hit zero.
            let mut alpha = 1.0f64;
            for (pos, &k) in idx.iter().enumerate() {
                if z[pos] <= 0.0 {
                    alpha = alpha.min(mu[k] / (mu[k] - z[pos]));
                }
            }
            for (pos, &k) in idx.iter().enumerate() {
                mu[k] += alpha * (z[pos] - mu[k]);
                if mu[k] <= 1e-15 * scale.max(1.0) {
                    mu[k] = 0.0;
                    passive[k] = false;
                }
            }
            if idx.iter().all(|&k| !passive[k]) {
                break;
            }
        }
        w = e.transpose() * (f - e * &mu);
    }
    mu
}

/// A symmetric matrix stored as contiguous diagonal blocks.
///
/// The Gram matrix of the propagator regression is block diagonal over the
/// target asset, so every consumer works block by block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonal {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockDiagonal {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Self {
        Self { blocks }
    }

    pub fn from_dense(a: DMatrix<f64>) -> Self {
        Self { blocks: vec![a] }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = acc;
                acc += b.nrows();
                o
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (b, off) in self.blocks.iter().zip(self.offsets()) {
            out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (b, off) in self.blocks.iter().zip(self.offsets()) {
            let n = b.nrows();
            let y = b * x.rows(off, n);
            out.rows_mut(off, n).copy_from(&y);
        }
        out
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.mul_vec(x))
    }

    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }

    pub fn cholesky(&self) -> Result<BlockCholesky> {
        let factors = self
            .blocks
            .iter()
            .enumerate()
            .map(|(idx, b)| {
                Cholesky::new(b.clone()).ok_or_else(|| {
                    Error::Factorization(format!("block {idx} is not positive definite"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockCholesky {
            factors,
            offsets: self.offsets(),
        })
    }
}

pub struct BlockCholesky {
    factors: Vec<Cholesky<f64, Dyn>>,
    offsets: Vec<usize>,
}

impl BlockCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(b.len());
        for (f, &off) in self.factors.iter().zip(&self.offsets) {
            let n = f.l_dirty().nrows();
            let x = f.solve(&b.rows(off, n).into_owned());
            out.rows_mut(off, n).copy_from(&x);
        }
        out
    }

    pub fn log_det(&self) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let l = f.l_dirty();
                (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum::<f64>()
            })
            .sum()
    }

    /// `‖L⁻¹ x‖` with `A = L Lᵀ`, i.e. `‖A^{-1/2} x‖` in the Cholesky sense.
    pub fn inv_sqrt_norm(&self, x: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for (f, &off) in self.factors.iter().zip(&self.offsets) {
            let l = f.l();
            let n = l.nrows();
            let y = l
                .solve_lower_triangular(&x.rows(off, n).into_owned())
                .expect("cholesky factor has a positive diagonal");
            acc += y.norm_squared();
        }
        acc.sqrt()
    }

    /// Ratio of the largest to smallest squared diagonal entry of the factor.
    pub fn diag_condition_estimate(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for f in &self.factors {
            let l = f.l_dirty();
            for i in 0..l.nrows() {
                let v = l[(i, i)] * l[(i, i)];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        hi / lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_ops_agree_with_dense() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(1, 1, &[2.0]);
        let bd = BlockDiagonal::new(vec![a, b]);
        let dense = bd.to_dense();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert!((bd.mul_vec(&x) - &dense * &x).norm() < 1e-14);

        let chol = bd.cholesky().unwrap();
        let sol = chol.solve(&x);
        assert!((&dense * sol - &x).norm() < 1e-12);
        assert!((chol.log_det() - dense.determinant().ln()).abs() < 1e-12);

        let inv = dense.try_inverse().unwrap();
        let expected = x.dot(&(inv * &x)).sqrt();
        assert!((chol.inv_sqrt_norm(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn nnls_small_problem() {
        // min ‖μ − (1, −1)‖ over μ ≥ 0 → (1, 0)
        let e = DMatrix::identity(2, 2);
        let mu = nnls(&e, &DVector::from_vec(vec![1.0, -1.0]), 100);
        assert!((mu - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-14);
        // Overdetermined with a binding constraint.
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mu = nnls(&e, &DVector::from_vec(vec![2.0, -1.0, 1.0]), 100);
        assert!((mu - DVector::from_vec(vec![1.5, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn min_eigenvalue_of_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        assert!((min_eigenvalue_sym(&a) + 2.0).abs() < 1e-14);
    }
}

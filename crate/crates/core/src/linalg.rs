//! Dense Cholesky factorization with a bounded jitter policy.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
    /// Diagonal jitter that was added before factoring.
    pub jitter: f64,
}

/// Block width of the factorization.
const BLOCK: usize = 96;

/// Factors a symmetric matrix, reading only its lower triangle.
///
/// On failure returns [`Error::NotPositiveDefinite`] with the 1-based order
/// of the first leading minor that is not positive.
pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Argument(format!("matrix is {}x{}, not square", n, a.ncols())));
    }
    let mut l = a.clone();
    // Right-looking over column blocks: factor the diagonal block, solve
    // the panel below it, then subtract the panel's outer product from the
    // trailing lower triangle one block column at a time.
    let mut k = 0;
    while k < n {
        let b = BLOCK.min(n - k);
        factor_block(&mut l, k, b)?;
        let rest = n - k - b;
        if rest > 0 {
            let l11 = l.view((k, k), (b, b)).into_owned();
            // panel X solves X L11^T = A21, i.e. L11 X^T = A21^T
            let mut xt = l.view((k + b, k), (rest, b)).transpose();
            l11.solve_lower_triangular_mut(&mut xt);
            let x = xt.transpose();
            l.view_mut((k + b, k), (rest, b)).copy_from(&x);
            let mut j = 0;
            while j < rest {
                let w = BLOCK.min(rest - j);
                let lhs = x.rows(j, rest - j);
                let rhs = xt.columns(j, w);
                let mut target = l.view_mut((k + b + j, k + b + j), (rest - j, w));
                target.gemm(-1.0, &lhs, &rhs, 1.0);
                j += w;
            }
        }
        k += b;
    }
    // Clear the strict upper triangle.
    for j in 1..n {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    Ok(Cholesky { l, jitter: 0.0 })
}

/// Unblocked left-looking factorization of the diagonal block at `(k, k)`
/// of width `b`, in place.
fn factor_block(l: &mut DMatrix<f64>, k: usize, b: usize) -> Result<()> {
    let n = l.nrows();
    let data = l.as_mut_slice();
    for j in k..k + b {
        let (done, rest) = data.split_at_mut(j * n);
        let col_j = &mut rest[j..k + b];
        for c in k..j {
            let col_c = &done[c * n + j..c * n + k + b];
            let ljc = col_c[0];
            if ljc == 0.0 {
                continue;
            }
            for (dst, s) in col_j.iter_mut().zip(col_c) {
                *dst -= ljc * s;
            }
        }
        let d = col_j[0];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { minor: j + 1 });
        }
        let d = d.sqrt();
        let inv = 1.0 / d;
        col_j[0] = d;
        for v in col_j[1..].iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// Factors `a`; on failure retries with `1e-10 * mean(diag)` added to the
/// diagonal, escalating tenfold up to three times.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<Cholesky> {
    match cholesky(a) {
        Ok(c) => Ok(c),
        Err(Error::NotPositiveDefinite { minor }) => {
            let n = a.nrows();
            let mean_diag = a.diagonal().sum() / n as f64;
            let mut jitter = 1e-10 * mean_diag.abs().max(f64::MIN_POSITIVE);
            let mut last = minor;
            for _ in 0..=3 {
                let mut b = a.clone();
                for i in 0..n {
                    b[(i, i)] += jitter;
                }
                match cholesky(&b) {
                    Ok(mut c) => {
                        c.jitter = jitter;
                        return Ok(c);
                    }
                    Err(Error::NotPositiveDefinite { minor }) => last = minor,
                    Err(e) => return Err(e),
                }
                jitter *= 10.0;
            }
            Err(Error::NotPositiveDefinite { minor: last })
        }
        Err(e) => Err(e),
    }
}

impl Cholesky {
    /// Wraps an already computed lower-triangular factor.
    pub(crate) fn from_lower(l: DMatrix<f64>) -> Self {
        Cholesky { l, jitter: 0.0 }
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L X = B` in place.
    pub fn solve_lower_mut(&self, b: &mut DMatrix<f64>) {
        let ok = self.l.solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }

    /// `L^{-1} B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        x
    }

    /// `A^{-1} B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L v`.
    pub fn mul_lower(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.l * v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 0.5 } else { 0.0 });
        &b * b.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn reconstructs_input() {
        let a = spd(9);
        let c = cholesky(&a).unwrap();
        let back = c.l() * c.l().transpose();
        assert!((back - &a).abs().max() < 1e-10);
        let nal = a.clone().cholesky().unwrap();
        assert!((nal.l() - c.l()).abs().max() < 1e-10);
        assert!((c.log_det() - a.determinant().ln()).abs() < 1e-9);
    }

    #[test]
    fn solves() {
        let a = spd(6);
        let b = DMatrix::from_fn(6, 2, |i, j| (i + j) as f64);
        let x = cholesky(&a).unwrap().solve(&b);
        assert!((&a * x - b).abs().max() < 1e-10);
    }

    #[test]
    fn reports_failing_minor() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        match cholesky(&a) {
            Err(Error::NotPositiveDefinite { minor }) => assert_eq!(minor, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // rank one
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let c = cholesky_jittered(&a).unwrap();
        assert!(c.jitter > 0.0 && c.jitter <= 1e-7 * 14.0 / 3.0);
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&neg), Err(Error::NotPositiveDefinite { minor: 2 })));
    }
}

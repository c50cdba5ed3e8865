//! Dense symmetric solvers used by the inner loops.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    /// Factors `a` (assumed symmetric; only the lower triangle is read).
    /// Fails with the offending pivot index when `a` is not positive definite.
    pub fn factor(a: &ArrayView2<f64>, context: &str) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected: "square matrix".to_string(),
                actual: format!("{}x{}", a.nrows(), a.ncols()),
            });
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = a[[j, j]];
            for k in 0..j {
                diag -= l[[j, k]] * l[[j, k]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::LinearSolve {
                    context: context.to_string(),
                    pivot: j,
                });
            }
            let ljj = diag.sqrt();
            l[[j, j]] = ljj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / ljj;
            }
        }
        Ok(Cholesky { l })
    }

    /// Solves `L L^T x = b`.
    pub fn solve(&self, b: &ArrayView1<f64>) -> Array1<f64> {
        let n = self.l.nrows();
        let mut x = b.to_owned();
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[[i, k]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[[k, i]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }
}

/// Solves the SPD system `a x = b` with one pass of iterative refinement.
pub fn spd_solve(a: &ArrayView2<f64>, b: &ArrayView1<f64>, context: &str) -> Result<Array1<f64>> {
    let chol = Cholesky::factor(a, context)?;
    let mut x = chol.solve(b);
    let r = b - &a.dot(&x);
    let dx = chol.solve(&r.view());
    x += &dx;
    Ok(x)
}

/// Checks that `k` is symmetric (within `sym_tol`) and positive semidefinite
/// up to `psd_tol`, i.e. the smallest eigenvalue is no less than `-psd_tol`.
pub fn check_kernel_psd(k: &ArrayView2<f64>, sym_tol: f64, psd_tol: f64) -> Result<()> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::KernelNotPsd(format!(
            "kernel is {}x{}, not square",
            k.nrows(),
            k.ncols()
        )));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (k[[i, j]] - k[[j, i]]).abs();
            if !(d <= sym_tol) {
                return Err(Error::KernelNotPsd(format!(
                    "asymmetry |K[{i},{j}] - K[{j},{i}]| = {d:.3e} exceeds {sym_tol:.1e}"
                )));
            }
        }
    }
    // Cholesky of K + (psd_tol + slack) I succeeds iff lambda_min > -psd_tol - slack;
    // the slack keeps eigenvalues exactly at -psd_tol on the passing side.
    let slack = psd_tol * 1e-3 + 1e-300;
    let mut shifted = k.to_owned();
    for i in 0..n {
        shifted[[i, i]] += psd_tol + slack;
    }
    // Symmetrize tiny asymmetries so the factorization sees one triangle.
    Cholesky::factor(&shifted.view(), "kernel PSD check").map_err(|_| {
        Error::KernelNotPsd(format!(
            "smallest eigenvalue below -{psd_tol:.1e} (shifted Cholesky failed)"
        ))
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn solves_spd_system() {
        let a = array![[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let x_true = array![1.0, -2.0, 0.5];
        let b = a.dot(&x_true);
        let x = spd_solve(&a.view(), &b.view(), "test").unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], x_true[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]]; // eigenvalues 3, -1
        let b = array![1.0, 1.0];
        let err = spd_solve(&a.view(), &b.view(), "test").unwrap_err();
        match err {
            Error::LinearSolve { pivot, .. } => assert_eq!(pivot, 1),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn psd_check_accepts_gram_rejects_indefinite() {
        let x = array![[1.0, 2.0, 0.0], [0.5, -1.0, 2.0]];
        let k = x.t().dot(&x); // Gram, PSD with rank 2 (singular)
        check_kernel_psd(&k.view(), 1e-12, 1e-8).unwrap();

        let bad = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(check_kernel_psd(&bad.view(), 1e-12, 1e-8).is_err());

        let asym = array![[1.0, 0.1], [0.0, 1.0]];
        assert!(check_kernel_psd(&asym.view(), 1e-12, 1e-8).is_err());
    }

    #[test]
    fn refinement_tightens_residual() {
        // moderately ill-conditioned SPD matrix
        let n = 6;
        let mut a = Array2::<f64>::eye(n);
        for i in 0..n {
            for j in 0..n {
                a[[i, j]] += 1.0 / ((i + j + 1) as f64); // Hilbert-like bump
            }
        }
        let x_true = Array1::from_iter((0..n).map(|i| (i as f64) - 2.5));
        let b = a.dot(&x_true);
        let x = spd_solve(&a.view(), &b.view(), "test").unwrap();
        let r = &b - &a.dot(&x);
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rn / bn < 1e-14, "relative residual {}", rn / bn);
    }
}

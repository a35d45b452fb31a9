use std::f64::consts::PI;

use super::complex::{ComplexMatrix, ComplexVector, C64};
use crate::error::{bail, Result, XceError};

/// Relative pivot threshold below which a Cholesky factorisation is refused.
const PIVOT_TOL: f64 = 1e-12;

/// Solves `A·X = B` for Hermitian positive-definite `A` by Cholesky
/// factorisation `A = L·Lᴴ` followed by forward and back substitution.
pub fn hermitian_solve(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if !a.is_square() {
        bail!(SingularMatrix, "matrix is {}x{}, not square", a.rows(), a.cols());
    }
    if b.rows() != a.rows() {
        bail!(SingularMatrix, "right-hand side has {} rows, matrix has {}", b.rows(), a.rows());
    }
    let l = cholesky(a)?;
    let n = a.rows();
    let k = b.cols();

    // L·Z = B
    let mut z = b.clone();
    for c in 0..k {
        for i in 0..n {
            let mut s = z[(i, c)];
            for j in 0..i {
                s -= l[(i, j)] * z[(j, c)];
            }
            z[(i, c)] = s / l[(i, i)];
        }
    }
    // Lᴴ·X = Z
    for c in 0..k {
        for i in (0..n).rev() {
            let mut s = z[(i, c)];
            for j in i + 1..n {
                s -= l[(j, i)].conj() * z[(j, c)];
            }
            z[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(z)
}

fn cholesky(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = a.rows();
    let max_diag = (0..n).map(|i| a[(i, i)].re).fold(f64::NEG_INFINITY, f64::max);
    if !(max_diag > 0.0) {
        bail!(SingularMatrix, "matrix has no positive diagonal entry");
    }
    let tol = PIVOT_TOL * max_diag;
    let mut l = ComplexMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > tol) {
            return Err(XceError::SingularMatrix(format!("pivot {} is {:.3e}, below {:.3e}", j, d, tol)));
        }
        let djj = d.sqrt();
        l[(j, j)] = C64::new(djj, 0.0);
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Least-squares coefficients `argmin ‖A·x − y‖` through the normal equations.
///
/// If `AᴴA` is numerically singular the system is regularised with a ridge
/// of `1e-10·trace/n`, which approaches the minimum-norm solution.
pub fn least_squares(a: &ComplexMatrix, y: &ComplexVector) -> Result<ComplexVector> {
    let n = a.cols();
    if n == 0 {
        bail!(InvalidArgument, "least squares with no columns");
    }
    let gram = a.adjoint().matmul(a)?;
    let rhs = ComplexMatrix::column_vector(&a.adjoint_mul_vec(y)?);
    let sol = match hermitian_solve(&gram, &rhs) {
        Ok(x) => x,
        Err(XceError::SingularMatrix(_)) => {
            let scale = (gram.trace().re / n as f64).max(f64::MIN_POSITIVE);
            let mut reg = gram.clone();
            for i in 0..n {
                reg[(i, i)] += C64::new(1e-10 * scale, 0.0);
            }
            match hermitian_solve(&reg, &rhs) {
                Ok(x) => x,
                // all-zero columns
                Err(XceError::SingularMatrix(_)) => return Ok(ComplexVector::zeros(n)),
                Err(e) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };
    Ok(sol.column(0))
}

/// `M×M` DFT dictionary: column `k` is the far-field steering vector at
/// `sin θ = −1 + 2k/M`, entry `m` equal to `exp(−jπ·m·sin θ)/√M`.
pub fn dft_matrix(m: usize) -> Result<ComplexMatrix> {
    if m == 0 {
        bail!(InvalidArgument, "DFT size must be positive");
    }
    let norm = 1.0 / (m as f64).sqrt();
    let mut out = ComplexMatrix::zeros(m, m);
    for k in 0..m {
        let s = -1.0 + 2.0 * k as f64 / m as f64;
        for i in 0..m {
            out[(i, k)] = C64::from_polar(norm, -PI * i as f64 * s);
        }
    }
    Ok(out)
}

//! Dense linear-algebra helpers shared by the Koopman and reduction modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative singular-value cutoff used by every least-squares solve.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Moore–Penrose pseudo-inverse with its effective rank.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    /// Ratio of the largest to the smallest retained singular value.
    pub condition: f64,
}

/// Pseudo-inverse through the SVD, discarding singular values below
/// `rel_cutoff · σ_max`.
pub fn pseudo_inverse(a: &DMatrix<f64>, rel_cutoff: f64) -> PseudoInverse {
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let threshold = rel_cutoff * sigma_max;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    let mut sigma_min = f64::INFINITY;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > threshold && s > 0.0 {
            rank += 1;
            sigma_min = sigma_min.min(s);
            // out += v_k u_kᵀ / s
            out.ger(1.0 / s, &v_t.row(k).transpose(), &u.column(k), 1.0);
        }
    }
    let condition = if rank == 0 {
        f64::INFINITY
    } else {
        sigma_max / sigma_min
    };
    PseudoInverse {
        matrix: out,
        rank,
        condition,
    }
}

/// Least-squares solution of `A x = b` for every column of `b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let utb = u.transpose() * b;
    let mut x = DMatrix::zeros(a.ncols(), b.ncols());
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_cutoff * sigma_max && s > 0.0 {
            rank += 1;
            let coeff = utb.row(k) / s;
            x += v_t.row(k).transpose() * coeff;
        }
    }
    (x, rank)
}

/// Eigenvalues and right eigenvectors (one per column) of a real square matrix.
/// Complex conjugate pairs come out adjacent.
pub fn eigen_real(a: &DMatrix<f64>) -> Result<(DVector<Complex64>, DMatrix<Complex64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::invalid("eigendecomposition needs a square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let m = faer::Mat::from_fn(n, n, |i, j| a[(i, j)]);
    let evd = faer::linalg::solvers::Eigen::new_from_real(m.as_ref())
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let s = evd.S();
    let u = evd.U();
    let values = DVector::from_fn(n, |i, _| s[i]);
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, j)]);
    Ok((values, vectors))
}

pub fn complex_inverse(m: &DMatrix<Complex64>) -> Option<DMatrix<Complex64>> {
    m.clone().try_inverse()
}

/// 2-norm condition number of a complex matrix.
pub fn complex_condition(m: &DMatrix<Complex64>) -> f64 {
    let s = m.clone().singular_values();
    let min = s.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        s.max() / min
    }
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

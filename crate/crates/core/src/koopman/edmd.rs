use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::dynamics::SnapshotSet;
use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, PINV_CUTOFF};

/// Snapshots per partial Gram sum. Fixed so the reduction tree, and hence the
/// rounding, does not depend on the thread count.
const CHUNK: usize = 1024;

/// Result of a Gram-based least-squares fit.
#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub matrix: DMatrix<f64>,
    /// Effective rank of the Gram matrix.
    pub rank: usize,
    /// Condition number of the retained part of the Gram matrix.
    pub condition: f64,
}

fn lift(basis: &BasisSet, x: &DMatrix<f64>, range: Range<usize>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(basis.size(), range.len());
    for (c, m) in range.enumerate() {
        basis.eval_into(x.column(m).as_slice(), out.column_mut(c).as_mut_slice());
    }
    out
}

/// Returns `G = Σ ℒ(x)ℒ(x)ᵀ / M` and `C = Σ t ℒ(x)ᵀ / M` where `t` are the
/// target columns. Partial sums are combined pairwise in index order.
fn moments(
    basis: &BasisSet,
    x: &DMatrix<f64>,
    targets: &(dyn Fn(Range<usize>) -> DMatrix<f64> + Sync),
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = x.ncols();
    let chunks: Vec<Range<usize>> = (0..m)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(m))
        .collect();
    let mut parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = chunks
        .into_par_iter()
        .map(|r| {
            let lx = lift(basis, x, r.clone());
            let t = targets(r);
            (&lx * lx.transpose(), t * lx.transpose())
        })
        .collect();
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some((g, c)) = it.next() {
            match it.next() {
                Some((g2, c2)) => next.push((g + g2, c + c2)),
                None => next.push((g, c)),
            }
        }
        parts = next;
    }
    let (g, c) = parts.pop().expect("at least one snapshot");
    let inv = 1.0 / m as f64;
    (g * inv, c * inv)
}

fn solve(
    what: &'static str,
    basis: &BasisSet,
    g: DMatrix<f64>,
    c: DMatrix<f64>,
) -> Result<LeastSquaresFit> {
    let eta = basis.size();
    let pinv = pseudo_inverse(&g, PINV_CUTOFF);
    if pinv.rank == 0 {
        return Err(Error::RankDeficient {
            what,
            rank: 0,
            size: eta,
        });
    }
    if pinv.rank < eta {
        log::warn!(
            "{what}: Gram matrix has effective rank {} of {eta}",
            pinv.rank
        );
    }
    log::debug!("{what}: Gram condition number {:e}", pinv.condition);
    Ok(LeastSquaresFit {
        matrix: c * pinv.matrix,
        rank: pinv.rank,
        condition: pinv.condition,
    })
}

fn check_snapshots(snap: &SnapshotSet, basis: &BasisSet) -> Result<()> {
    if snap.dim() != basis.dim() {
        return Err(Error::invalid("snapshot and basis dimensions differ"));
    }
    if snap.len() < basis.size() {
        return Err(Error::invalid(format!(
            "{} snapshots cannot determine {} basis coefficients",
            snap.len(),
            basis.size()
        )));
    }
    Ok(())
}

/// Discrete-time Koopman matrix `K̃ = A G⁺` minimizing `‖ℒ(Y) − K̃ ℒ(X)‖_F`.
pub fn edmd_koopman(snap: &SnapshotSet, basis: &BasisSet) -> Result<LeastSquaresFit> {
    check_snapshots(snap, basis)?;
    let (g, a) = moments(basis, &snap.x, &|r| lift(basis, &snap.y, r));
    solve("EDMD Gram matrix", basis, g, a)
}

/// Least-squares observable matrix from observable values `g_values`
/// (`γ × M`, one column per snapshot).
pub fn observable_matrix_edmd(
    snap: &SnapshotSet,
    g_values: &DMatrix<f64>,
    basis: &BasisSet,
) -> Result<LeastSquaresFit> {
    check_snapshots(snap, basis)?;
    if g_values.ncols() != snap.len() || g_values.nrows() == 0 {
        return Err(Error::invalid(format!(
            "observable values are {}x{}, expected γx{}",
            g_values.nrows(),
            g_values.ncols(),
            snap.len()
        )));
    }
    let (g, c) = moments(basis, &snap.x, &|r| g_values.columns_range(r).into_owned());
    solve("observable Gram matrix", basis, g, c)
}

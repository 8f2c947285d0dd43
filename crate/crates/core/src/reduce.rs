//! Least-squares reduction of a propagated log-density to a low-order
//! polynomial, so that propagation legs can be chained without the order
//! of the composite growing.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{binomial, enumerate_indices, BoxDomain, MultiIndex};
use crate::dynamics::uniform_point;
use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::linalg::{lstsq, PINV_CUTOFF};
use crate::updf::{
    eval_monomials, linspace, FitDiagnostics, InverseMapLogDensity, LogDensity, PolyLogPdf,
    SUPPORT_DEPTH,
};

/// Default sample count per fitted monomial.
pub const SAMPLES_PER_MONOMIAL: usize = 20;
/// Default target order.
pub const DEFAULT_ORDER: usize = 4;
/// Normal equations are only used below this condition number of `ΞᵀΞ`.
pub const MAX_NORMAL_CONDITION: f64 = 1e12;

/// Number of monomials of total degree at most `order` in `n` variables.
pub fn monomial_count(n: usize, order: usize) -> usize {
    binomial(n + order, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionConfig {
    pub order: usize,
    pub samples: usize,
    pub region: BoxDomain,
    pub seed: u64,
}

impl ReductionConfig {
    /// Config with the default sample count `20 ×` the number of monomials.
    pub fn new(order: usize, region: BoxDomain, seed: u64) -> Self {
        let samples = SAMPLES_PER_MONOMIAL * monomial_count(region.dim(), order);
        Self {
            order,
            samples,
            region,
            seed,
        }
    }

    pub fn monomials(&self) -> usize {
        monomial_count(self.region.dim(), self.order)
    }

    /// Checks `ω ≥ 1`, that enough samples remain for the fit after the
    /// hold-out, and `ω < 2α` when the Koopman order `α` is known.
    pub fn validate(&self, koopman_order: Option<usize>) -> Result<()> {
        if self.order == 0 {
            return Err(Error::invalid("reduction order must be at least 1"));
        }
        if let Some(alpha) = koopman_order {
            if self.order >= 2 * alpha {
                return Err(Error::invalid(format!(
                    "reduction order {} must be below twice the Koopman order {alpha}",
                    self.order
                )));
            }
        }
        let (fit, _) = split_sizes(self.samples);
        if fit < self.monomials() {
            return Err(Error::invalid(format!(
                "{} samples leave {fit} for fitting {} monomials",
                self.samples,
                self.monomials()
            )));
        }
        Ok(())
    }
}

/// Every fifth sample (20%) is held out for validation.
fn is_held_out(j: usize) -> bool {
    j % 5 == 4
}

fn split_sizes(n: usize) -> (usize, usize) {
    let held = (0..n).filter(|&j| is_held_out(j)).count();
    (n - held, held)
}

/// The regression matrix `Ξ`, one row of monomial values per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub order: usize,
    pub indices: Vec<MultiIndex>,
    pub matrix: DMatrix<f64>,
}

/// `Ξ_jk = x_j^{e_k}` for samples given one per column of `samples`.
pub fn build_design_matrix(samples: &DMatrix<f64>, order: usize) -> DesignMatrix {
    let n = samples.nrows();
    let indices = enumerate_indices(n, order);
    let rows: Vec<Vec<f64>> = (0..samples.ncols())
        .into_par_iter()
        .map(|j| {
            let mut row = vec![0.0; indices.len()];
            eval_monomials(&indices, order, samples.column(j).as_slice(), &mut row);
            row
        })
        .collect();
    let matrix = DMatrix::from_fn(rows.len(), indices.len(), |j, k| rows[j][k]);
    DesignMatrix {
        order,
        indices,
        matrix,
    }
}

/// Least-squares coefficients with fit diagnostics.
#[derive(Debug, Clone)]
pub struct CoefficientFit {
    pub coefficients: DVector<f64>,
    pub rank: usize,
    /// Condition number of `Ξ`.
    pub condition: f64,
    pub residual_rms: f64,
}

fn rms(r: &DVector<f64>) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        (r.norm_squared() / r.len() as f64).sqrt()
    }
}

/// Minimizer of `‖p − Ξc‖²` through the SVD of `Ξ`.
pub fn fit_coefficients(xi: &DesignMatrix, p: &DVector<f64>) -> Result<CoefficientFit> {
    let a = &xi.matrix;
    if p.len() != a.nrows() {
        return Err(Error::invalid(format!(
            "{} realizations for a design matrix with {} rows",
            p.len(),
            a.nrows()
        )));
    }
    let cols = a.ncols();
    let (c, rank) = lstsq(
        a,
        &DMatrix::from_column_slice(p.len(), 1, p.as_slice()),
        PINV_CUTOFF,
    );
    if rank < cols {
        return Err(Error::RankDeficient {
            what: "design matrix (use more samples or a lower order)",
            rank,
            size: cols,
        });
    }
    let s = a.singular_values();
    let condition = s.max() / s.min();
    let coefficients = c.column(0).into_owned();
    let residual_rms = rms(&(p - a * &coefficients));
    Ok(CoefficientFit {
        coefficients,
        rank,
        condition,
        residual_rms,
    })
}

/// The explicit `(ΞᵀΞ)⁻¹ Ξᵀ p` solve, refused when `ΞᵀΞ` is too ill-conditioned.
pub fn fit_coefficients_normal(xi: &DesignMatrix, p: &DVector<f64>) -> Result<DVector<f64>> {
    let a = &xi.matrix;
    let normal = a.transpose() * a;
    let s = normal.clone().symmetric_eigenvalues();
    let condition = s.max() / s.min();
    if !(condition < MAX_NORMAL_CONDITION) {
        return Err(Error::IllConditioned {
            what: "normal equations",
            condition,
        });
    }
    let chol = normal.cholesky().ok_or(Error::IllConditioned {
        what: "normal equations",
        condition,
    })?;
    Ok(chol.solve(&(a.transpose() * p)))
}

/// Rewrites `Σ c_k ((x−center)/half)^{e_k}` as a polynomial in `x`.
fn unscale_coefficients(
    indices: &[MultiIndex],
    scaled: &DVector<f64>,
    center: &[f64],
    half: &[f64],
) -> Vec<f64> {
    let n = center.len();
    let position: HashMap<&MultiIndex, usize> =
        indices.iter().enumerate().map(|(k, m)| (m, k)).collect();
    let mut out = vec![0.0; indices.len()];
    for (idx, &c) in indices.iter().zip(scaled.iter()) {
        if c == 0.0 {
            continue;
        }
        // expand Π_d h_d^{-e_d} Σ_m C(e_d, m) x_d^m (−c_d)^{e_d−m}
        let mut terms: Vec<(Vec<usize>, f64)> = vec![(Vec::with_capacity(n), c)];
        for d in 0..n {
            let e = idx.0[d];
            let scale = half[d].powi(-(e as i32));
            let mut next = Vec::with_capacity(terms.len() * (e + 1));
            for (exps, coef) in &terms {
                for m in 0..=e {
                    let factor = binomial(e, m) as f64 * (-center[d]).powi((e - m) as i32) * scale;
                    let mut ex = exps.clone();
                    ex.push(m);
                    next.push((ex, coef * factor));
                }
            }
            terms = next;
        }
        for (exps, coef) in terms {
            let k = position[&MultiIndex(exps)];
            out[k] += coef;
        }
    }
    out
}

/// Fits an order-`ω` polynomial to `f` on uniform samples of the region.
/// The returned log-density carries the fit diagnostics.
pub fn reduce_logpdf(f: &dyn LogDensity, cfg: &ReductionConfig) -> Result<PolyLogPdf> {
    cfg.validate(None)?;
    let region = &cfg.region;
    let n = region.dim();
    if f.dim() != n {
        return Err(Error::invalid("log-density and region dimensions differ"));
    }
    let center = region.center();
    let half = region.half_widths();
    let draws: Vec<(Vec<f64>, f64)> = (0..cfg.samples)
        .into_par_iter()
        .map(|j| {
            let x = uniform_point(region, cfg.seed, j as u64);
            let p = f.log_density(&x);
            (x, p)
        })
        .collect();
    let bad: Vec<&(Vec<f64>, f64)> = draws
        .iter()
        .filter(|(_, p)| p.is_nan() || *p == f64::INFINITY)
        .collect();
    if let Some((x, _)) = bad.first() {
        return Err(Error::NonFinite {
            count: bad.len(),
            first: x.clone(),
        });
    }
    // draws where the density vanishes lie outside its support and carry no
    // information for the fit
    let mut fit_cols = Vec::new();
    let mut held_x = Vec::new();
    let mut held_p = Vec::new();
    for (j, (x, p)) in draws.iter().enumerate() {
        if *p == f64::NEG_INFINITY {
            continue;
        }
        if is_held_out(j) {
            held_x.push(x.clone());
            held_p.push(*p);
        } else {
            fit_cols.push(j);
        }
    }
    let (fit_n, held_n) = (fit_cols.len(), held_x.len());
    let skipped = cfg.samples - fit_n - held_n;
    if skipped > 0 {
        log::warn!(
            "{skipped} of {} reduction samples fall outside the density's support",
            cfg.samples
        );
    }
    if fit_n < cfg.monomials() {
        return Err(Error::RankDeficient {
            what: "reduction samples inside the support (use more samples or a tighter region)",
            rank: fit_n,
            size: cfg.monomials(),
        });
    }
    let mut fit_x = DMatrix::zeros(n, fit_n);
    let mut fit_p = DVector::zeros(fit_n);
    for (col, &j) in fit_cols.iter().enumerate() {
        let (x, p) = &draws[j];
        for d in 0..n {
            fit_x[(d, col)] = (x[d] - center[d]) / half[d];
        }
        fit_p[col] = *p;
    }
    let xi = build_design_matrix(&fit_x, cfg.order);
    let fit = fit_coefficients(&xi, &fit_p)?;
    let coefficients = unscale_coefficients(&xi.indices, &fit.coefficients, &center, &half);
    let reduced = PolyLogPdf::new(cfg.order, coefficients, region.clone(), true)?.bounded();

    let held_err = DVector::from_iterator(
        held_n,
        held_x.iter().zip(&held_p).map(|(x, p)| reduced.eval(x) - p),
    );
    let (lo, hi) = draws
        .iter()
        .filter(|(_, p)| p.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, p)| {
            (lo.min(*p), hi.max(*p))
        });
    let range = hi - lo;
    let held_out_rms = rms(&held_err);
    let diagnostics = FitDiagnostics {
        fitted: fit_n,
        held_out: held_n,
        rank: fit.rank,
        condition: fit.condition,
        residual_rms: fit.residual_rms,
        held_out_rms,
        held_out_relative_rms: if range > 0.0 {
            held_out_rms / range
        } else {
            held_out_rms
        },
    };
    log::info!(
        "reduced to order {}: held-out RMS {:.3e} ({:.3e} of the sampled range)",
        cfg.order,
        diagnostics.held_out_rms,
        diagnostics.held_out_relative_rms
    );
    Ok(reduced.with_diagnostics(diagnostics))
}

/// Bounding box of `{x : f(x) ≥ max f − depth}` located on a
/// `resolution`-per-axis grid over `search`, widened by one grid cell and
/// clipped to `search`.
pub fn credible_region(
    f: &dyn LogDensity,
    search: &BoxDomain,
    resolution: usize,
    depth: f64,
) -> Result<BoxDomain> {
    let n = search.dim();
    if f.dim() != n || resolution < 2 {
        return Err(Error::invalid(
            "credible region needs a matching dimension and at least 2 points per axis",
        ));
    }
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|d| linspace(search.lower()[d], search.upper()[d], resolution))
        .collect();
    let total = resolution.pow(n as u32);
    let point = |k: usize| -> Vec<usize> {
        let mut rem = k;
        let mut idx = vec![0; n];
        for d in (0..n).rev() {
            idx[d] = rem % resolution;
            rem /= resolution;
        }
        idx
    };
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|k| {
            let x: Vec<f64> = point(k)
                .iter()
                .enumerate()
                .map(|(d, &i)| axes[d][i])
                .collect();
            f.log_density(&x)
        })
        .collect();
    let top = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::NonFinite {
            count: total,
            first: search.lower().to_vec(),
        });
    }
    let mut lo_i = vec![usize::MAX; n];
    let mut hi_i = vec![0; n];
    for (k, v) in values.iter().enumerate() {
        if v.is_finite() && *v >= top - depth {
            for (d, &i) in point(k).iter().enumerate() {
                lo_i[d] = lo_i[d].min(i);
                hi_i[d] = hi_i[d].max(i);
            }
        }
    }
    let lower = (0..n).map(|d| axes[d][lo_i[d].saturating_sub(1)]).collect();
    let upper = (0..n)
        .map(|d| axes[d][(hi_i[d] + 1).min(resolution - 1)])
        .collect();
    BoxDomain::new(lower, upper)
}

/// [`credible_region`] at the standard support depth.
pub fn support_region(
    f: &dyn LogDensity,
    search: &BoxDomain,
    resolution: usize,
) -> Result<BoxDomain> {
    credible_region(f, search, resolution, SUPPORT_DEPTH)
}

/// Settings for chaining propagation legs through reductions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecursionPlan {
    /// Leg durations in seconds.
    pub legs: Vec<f64>,
    pub order: usize,
    /// Samples per reduction; `None` uses `20 ×` the monomial count.
    pub samples: Option<usize>,
    /// Reduction after leg `k` uses `seed + k`.
    pub seed: u64,
    /// Per-axis resolution of the support-region search over the basis box.
    pub resolution: usize,
}

/// Propagates `prior` leg by leg, reducing the log-density at every leg
/// boundary. Entry `k` of the result is the starting log-density of leg `k`,
/// so the first entry is `prior` and the final density is
/// `InverseMapLogDensity::new(model, result.last(), legs.last())`.
pub fn reduce_between_legs(
    model: &KoopmanModel,
    prior: PolyLogPdf,
    plan: &RecursionPlan,
) -> Result<Vec<PolyLogPdf>> {
    if plan.legs.is_empty() {
        return Err(Error::invalid("a recursion needs at least one leg"));
    }
    let search = model.basis().domain();
    let mut starts = vec![prior];
    for (k, &dt) in plan.legs[..plan.legs.len() - 1].iter().enumerate() {
        let current = starts.last().expect("starts is never empty");
        let leg = InverseMapLogDensity::new(model, current, dt)?;
        let region = support_region(&leg, search, plan.resolution)?;
        let mut cfg = ReductionConfig::new(plan.order, region, plan.seed.wrapping_add(k as u64));
        if let Some(n) = plan.samples {
            cfg.samples = n;
        }
        cfg.validate(Some(model.basis().order()))?;
        let reduced = reduce_logpdf(&leg, &cfg)?;
        starts.push(reduced);
    }
    Ok(starts)
}

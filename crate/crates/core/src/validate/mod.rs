//! Independent oracles and comparison metrics: Monte Carlo propagation with
//! kernel density estimates, the exact linear-oscillator push-forward, state
//! error series against the reference integrator and eigenvalue pairing.

mod assign;
mod mc;

pub use assign::min_cost_assignment;
pub use mc::{density_estimate, mc_propagate, Bandwidth, McEnsemble, MC_TOL};

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dop853, Duffing, Dynamics, Tolerance};
use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::updf::{GaussianPdf, GridEvaluation};

fn check_pair(a: &GridEvaluation, b: &GridEvaluation) -> Result<()> {
    if !a.same_axes(b) {
        return Err(Error::GridMismatch("grids have different axes".into()));
    }
    if !(a.is_normalized() && b.is_normalized()) {
        return Err(Error::GridMismatch("both grids must be normalized".into()));
    }
    Ok(())
}

/// `√∫(a−b)² / √∫b²` with trapezoidal integrals.
pub fn grid_l2(a: &GridEvaluation, b: &GridEvaluation) -> Result<f64> {
    check_pair(a, b)?;
    let w = a.weights();
    let mut diff = 0.0;
    let mut reference = 0.0;
    for ((wk, x), y) in w.iter().zip(a.values()).zip(b.values()) {
        diff += wk * (x - y) * (x - y);
        reference += wk * y * y;
    }
    if reference <= 0.0 {
        return Err(Error::GridMismatch(
            "reference grid is identically zero".into(),
        ));
    }
    Ok((diff / reference).sqrt())
}

/// `max |a−b| / max b`.
pub fn max_pointwise(a: &GridEvaluation, b: &GridEvaluation) -> Result<f64> {
    check_pair(a, b)?;
    let worst = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let peak = b.max();
    if peak <= 0.0 {
        return Err(Error::GridMismatch(
            "reference grid has no positive values".into(),
        ));
    }
    Ok(worst / peak)
}

/// State-transition matrix of the linear oscillator (`ε = 0`) over `t`.
pub fn harmonic_transition(params: &Duffing, t: f64) -> Result<DMatrix<f64>> {
    if params.epsilon != 0.0 {
        return Err(Error::invalid("the closed-form flow needs ε = 0"));
    }
    params.validate()?;
    let m = params.mass;
    let w = (params.stiffness / m).sqrt();
    let (s, c) = (w * t).sin_cos();
    Ok(DMatrix::from_row_slice(
        2,
        2,
        &[c, s / (m * w), -m * w * s, c],
    ))
}

/// Exact push-forward `N(Φμ, ΦPΦᵀ)` of a Gaussian under the linear oscillator.
pub fn harmonic_push_forward(prior: &GaussianPdf, params: &Duffing, t: f64) -> Result<GaussianPdf> {
    let phi = harmonic_transition(params, t)?;
    let mean = &phi * prior.mean();
    let cov = &phi * prior.covariance() * phi.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianPdf::new(mean.iter().copied().collect(), cov)
}

/// Euclidean error `‖forward_flow(x0, t) − integrate(x0, t)‖₂` at each of the
/// non-decreasing, non-negative `times`.
pub fn state_error_series(
    model: &KoopmanModel,
    sys: &dyn Dynamics,
    x0: &[f64],
    times: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::invalid(
            "error-series times must be non-negative and non-decreasing",
        ));
    }
    let mut solver = Dop853::new(x0.len(), Tolerance::uniform(tol));
    let mut state = x0.to_vec();
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        solver.integrate(sys, &mut state, now, t)?;
        now = t;
        let ko = model.flow_map(t).apply(x0);
        let err = ko
            .iter()
            .zip(&state)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        out.push(err);
    }
    Ok(out)
}

/// Writes `t,err_galerkin,err_edmd` rows.
pub fn write_error_series<W: Write>(
    out: W,
    times: &[f64],
    galerkin: &[f64],
    edmd: &[f64],
) -> Result<()> {
    if galerkin.len() != times.len() || edmd.len() != times.len() {
        return Err(Error::invalid("error series lengths differ"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "err_galerkin", "err_edmd"])?;
    for k in 0..times.len() {
        w.write_record([
            format!("{:e}", times[k]),
            format!("{:e}", galerkin[k]),
            format!("{:e}", edmd[k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pairing of two eigenvalue sets of equal size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenvalueReport {
    /// `pairing[i]` is the index in the second set matched to entry `i` of the first.
    pub pairing: Vec<usize>,
    pub max_distance: f64,
    pub mean_distance: f64,
    pub max_abs_re_galerkin: f64,
    pub max_abs_re_edmd: f64,
}

/// Optimal-assignment pairing of Galerkin and EDMD eigenvalues.
pub fn eigenvalue_report(
    galerkin: &DVector<Complex64>,
    edmd: &DVector<Complex64>,
) -> Result<EigenvalueReport> {
    if galerkin.len() != edmd.len() {
        return Err(Error::invalid("eigenvalue sets differ in size"));
    }
    let cost: Vec<Vec<f64>> = galerkin
        .iter()
        .map(|a| edmd.iter().map(|b| (a - b).norm()).collect())
        .collect();
    let pairing = min_cost_assignment(&cost);
    let d: Vec<f64> = pairing
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .collect();
    let max_re = |v: &DVector<Complex64>| v.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    Ok(EigenvalueReport {
        max_distance: d.iter().copied().fold(0.0, f64::max),
        mean_distance: if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        },
        pairing,
        max_abs_re_galerkin: max_re(galerkin),
        max_abs_re_edmd: max_re(edmd),
    })
}

/// Density agreement between a propagated density and a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityComparison {
    pub grid_l2: f64,
    pub max_pointwise: f64,
}

impl DensityComparison {
    pub fn between(a: &GridEvaluation, reference: &GridEvaluation) -> Result<Self> {
        Ok(Self {
            grid_l2: grid_l2(a, reference)?,
            max_pointwise: max_pointwise(a, reference)?,
        })
    }
}

/// Final-time summary of two state error series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateErrorSummary {
    pub final_time: f64,
    pub final_galerkin: f64,
    pub final_edmd: f64,
    pub max_galerkin: f64,
    pub max_edmd: f64,
}

impl StateErrorSummary {
    pub fn from_series(times: &[f64], galerkin: &[f64], edmd: &[f64]) -> Option<Self> {
        Some(Self {
            final_time: *times.last()?,
            final_galerkin: *galerkin.last()?,
            final_edmd: *edmd.last()?,
            max_galerkin: galerkin.iter().copied().fold(0.0, f64::max),
            max_edmd: edmd.iter().copied().fold(0.0, f64::max),
        })
    }
}

/// Collected metrics of one run, serialized as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityComparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<EigenvalueReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_error: Option<StateErrorSummary>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ComparisonReport {
    /// Fails if any metric is negative or not finite.
    pub fn check(&self) -> Result<()> {
        let mut values = Vec::new();
        if let Some(d) = &self.density {
            values.extend([d.grid_l2, d.max_pointwise]);
        }
        if let Some(e) = &self.eigenvalues {
            values.extend([
                e.max_distance,
                e.mean_distance,
                e.max_abs_re_galerkin,
                e.max_abs_re_edmd,
            ]);
        }
        if let Some(s) = &self.state_error {
            values.extend([s.final_galerkin, s.final_edmd, s.max_galerkin, s.max_edmd]);
        }
        let bad = values
            .iter()
            .filter(|v| !(v.is_finite() && **v >= 0.0))
            .count();
        if bad > 0 {
            return Err(Error::NonFinite {
                count: bad,
                first: Vec::new(),
            });
        }
        Ok(())
    }
}

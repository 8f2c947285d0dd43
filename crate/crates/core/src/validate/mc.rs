use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BoxDomain;
use crate::dynamics::{Dop853, Dynamics, Tolerance};
use crate::error::{Error, Result};
use crate::updf::{GaussianPdf, GridEvaluation};

/// Integrator tolerance for Monte Carlo samples.
pub const MC_TOL: f64 = 1e-10;

/// Kernel support in bandwidths; contributions beyond it are below 1e-7
/// of the kernel peak and are skipped.
const KERNEL_REACH: f64 = 6.0;

/// Samples per partial density grid.
const KDE_CHUNK: usize = 4096;

/// Monte Carlo samples of the state at time `t`, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct McEnsemble {
    pub samples: DMatrix<f64>,
    pub t: f64,
    pub seed: u64,
}

impl McEnsemble {
    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.samples.column_mean()
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let centered = DMatrix::from_fn(self.dim(), self.len(), |i, j| self.samples[(i, j)] - m[i]);
        &centered * centered.transpose() / (self.len() as f64 - 1.0)
    }

    /// Fraction of samples inside `domain`.
    pub fn fraction_inside(&self, domain: &BoxDomain) -> f64 {
        let inside = self
            .samples
            .column_iter()
            .filter(|c| domain.contains(c.as_slice()))
            .count();
        inside as f64 / self.len() as f64
    }
}

/// Draw `j` of the prior under `seed`, from its own counter-based stream.
fn prior_draw(prior: &GaussianPdf, chol: &DMatrix<f64>, seed: u64, j: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    let n = prior.mean().len();
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    (prior.mean() + chol * z).iter().copied().collect()
}

/// Samples the prior and integrates every sample from 0 to `tf`.
pub fn mc_propagate(
    prior: &GaussianPdf,
    sys: &dyn Dynamics,
    tf: f64,
    count: usize,
    seed: u64,
    tol: f64,
) -> Result<McEnsemble> {
    let n = prior.mean().len();
    if sys.dim() != n {
        return Err(Error::invalid("prior and system dimensions differ"));
    }
    if count == 0 {
        return Err(Error::invalid("Monte Carlo needs at least one sample"));
    }
    let chol = prior
        .covariance()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("prior covariance is not positive definite"))?
        .l();
    let states: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map_init(
            || Dop853::new(n, Tolerance::uniform(tol)),
            |solver, j| {
                let mut x = prior_draw(prior, &chol, seed, j);
                solver
                    .integrate(sys, &mut x, 0.0, tf)
                    .map_err(|e| Error::SampleFailed {
                        index: j,
                        source: Box::new(e),
                    })?;
                Ok(x)
            },
        )
        .collect::<Result<_>>()?;
    let mut samples = DMatrix::zeros(n, count);
    for (j, x) in states.iter().enumerate() {
        samples.column_mut(j).copy_from_slice(x);
    }
    Ok(McEnsemble {
        samples,
        t: tf,
        seed,
    })
}

/// Kernel width choice for [`density_estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Silverman's rule per dimension, `σ_d (4 / ((n+2) N))^{1/(n+4)}`.
    Silverman,
    Fixed(Vec<f64>),
}

impl Bandwidth {
    pub fn resolve(&self, ens: &McEnsemble) -> Result<Vec<f64>> {
        let n = ens.dim();
        let h = match self {
            Bandwidth::Silverman => {
                if ens.len() < 2 {
                    return Err(Error::invalid(
                        "Silverman's rule needs at least two samples",
                    ));
                }
                let cov = ens.covariance();
                let factor =
                    (4.0 / ((n as f64 + 2.0) * ens.len() as f64)).powf(1.0 / (n as f64 + 4.0));
                (0..n).map(|d| cov[(d, d)].sqrt() * factor).collect()
            }
            Bandwidth::Fixed(h) => h.clone(),
        };
        if h.len() != n || h.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "bandwidth must be {n} positive values, got {h:?}"
            )));
        }
        Ok(h)
    }
}

/// Index range of `axis` within `[lo, hi]`.
fn window(axis: &[f64], lo: f64, hi: f64) -> std::ops::Range<usize> {
    let start = axis.partition_point(|v| *v < lo);
    let end = axis.partition_point(|v| *v <= hi);
    start..end.max(start)
}

/// Gaussian product-kernel density estimate on a tensor grid, normalized to
/// unit trapezoidal mass. Returns the grid and the bandwidth used.
pub fn density_estimate(
    ens: &McEnsemble,
    axes: Vec<Vec<f64>>,
    bandwidth: &Bandwidth,
) -> Result<(GridEvaluation, Vec<f64>)> {
    if ens.is_empty() {
        return Err(Error::invalid(
            "cannot estimate a density from an empty ensemble",
        ));
    }
    let n = ens.dim();
    if axes.len() != n {
        return Err(Error::GridMismatch(format!(
            "{}-D grid for a {n}-D ensemble",
            axes.len()
        )));
    }
    let h = bandwidth.resolve(ens)?;
    let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
    let len: usize = shape.iter().product();
    let norm: f64 = h
        .iter()
        .map(|hd| hd * (2.0 * std::f64::consts::PI).sqrt())
        .product::<f64>()
        * ens.len() as f64;

    let partial = |range: std::ops::Range<usize>| -> Vec<f64> {
        let mut grid = vec![0.0; len];
        let mut kernels: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut starts = vec![0usize; n];
        for j in range {
            let x = ens.samples.column(j);
            let mut empty = false;
            for d in 0..n {
                let r = window(
                    &axes[d],
                    x[d] - KERNEL_REACH * h[d],
                    x[d] + KERNEL_REACH * h[d],
                );
                starts[d] = r.start;
                kernels[d].clear();
                kernels[d].extend(axes[d][r].iter().map(|a| {
                    let z = (a - x[d]) / h[d];
                    (-0.5 * z * z).exp()
                }));
                empty |= kernels[d].is_empty();
            }
            if empty {
                continue;
            }
            accumulate(&mut grid, &shape, &starts, &kernels);
        }
        grid
    };

    let chunks: Vec<std::ops::Range<usize>> = (0..ens.len())
        .step_by(KDE_CHUNK)
        .map(|s| s..(s + KDE_CHUNK).min(ens.len()))
        .collect();
    let mut parts: Vec<Vec<f64>> = chunks.into_par_iter().map(partial).collect();
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    let values: Vec<f64> = parts
        .pop()
        .expect("non-empty ensemble")
        .into_iter()
        .map(|v| v / norm)
        .collect();
    let grid = GridEvaluation::new(axes, values, false)?.normalized()?;
    Ok((grid, h))
}

/// Adds the outer product of the per-axis kernel windows into the grid.
fn accumulate(grid: &mut [f64], shape: &[usize], starts: &[usize], kernels: &[Vec<f64>]) {
    let n = shape.len();
    let mut idx = vec![0usize; n];
    loop {
        let mut flat = 0;
        let mut w = 1.0;
        for d in 0..n {
            flat = flat * shape[d] + starts[d] + idx[d];
            w *= kernels[d][idx[d]];
        }
        grid[flat] += w;
        let mut d = n;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < kernels[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Duffing;
    use crate::updf::{evaluate_on_grid, linspace, Density, GridFunction};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn prior() -> GaussianPdf {
        GaussianPdf::isotropic(vec![0.4, 0.6], 0.1).unwrap()
    }

    #[test]
    fn zero_horizon_reproduces_prior_moments() {
        let n = 20_000;
        let ens = mc_propagate(&prior(), &Duffing::default(), 0.0, n, 3, MC_TOL).unwrap();
        let se = 0.1 / (n as f64).sqrt();
        let m = ens.mean();
        assert!((m[0] - 0.4).abs() < 4.0 * se && (m[1] - 0.6).abs() < 4.0 * se);
        let c = ens.covariance();
        // standard error of a variance estimate is σ²√(2/N)
        let var_se = 0.01 * (2.0 / n as f64).sqrt();
        assert!((c[(0, 0)] - 0.01).abs() < 4.0 * var_se);
        assert!((c[(1, 1)] - 0.01).abs() < 4.0 * var_se);
        assert!(c[(0, 1)].abs() < 4.0 * 0.01 / (n as f64).sqrt());
    }

    #[test]
    fn harmonic_quarter_turn_rotates_mean() {
        let n = 5_000;
        let ens = mc_propagate(
            &prior(),
            &Duffing::harmonic(),
            std::f64::consts::FRAC_PI_2,
            n,
            8,
            MC_TOL,
        )
        .unwrap();
        let se = 0.1 / (n as f64).sqrt();
        let m = ens.mean();
        assert!(
            (m[0] - 0.6).abs() < 4.0 * se && (m[1] + 0.4).abs() < 4.0 * se,
            "{m}"
        );
    }

    #[test]
    fn seeded_and_thread_independent() {
        let a = mc_propagate(&prior(), &Duffing::default(), 5.0, 300, 11, MC_TOL).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let b = pool
            .install(|| mc_propagate(&prior(), &Duffing::default(), 5.0, 300, 11, MC_TOL).unwrap());
        assert_eq!(a, b);
        // a prefix of a larger run is the same draw
        let c = mc_propagate(&prior(), &Duffing::default(), 5.0, 100, 11, MC_TOL).unwrap();
        assert_eq!(c.samples, a.samples.columns(0, 100).into_owned());
    }

    #[test]
    fn failing_sample_is_named() {
        struct Blowup;
        impl Dynamics for Blowup {
            fn dim(&self) -> usize {
                2
            }
            fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
                dx[0] = x[0] * x[0];
                dx[1] = 0.0;
            }
        }
        let err = mc_propagate(&prior(), &Blowup, 10.0, 4, 1, MC_TOL).unwrap_err();
        assert!(matches!(err, Error::SampleFailed { index: 0, .. }), "{err}");
    }

    #[test]
    fn single_point_gives_centered_bump() {
        let ens = McEnsemble {
            samples: DMatrix::from_element(2, 10, 0.3),
            t: 0.0,
            seed: 0,
        };
        let axes = vec![linspace(-1.0, 1.0, 41), linspace(-1.0, 1.0, 41)];
        let (g, _) = density_estimate(&ens, axes, &Bandwidth::Fixed(vec![0.1, 0.1])).unwrap();
        for v in g.point(g.argmax()) {
            assert_relative_eq!(v, 0.3, epsilon = 1e-12);
        }
        assert_relative_eq!(g.integral(), 1.0, epsilon = 1e-12);
        assert!(
            density_estimate(&ens, vec![linspace(0.0, 1.0, 3)], &Bandwidth::Silverman).is_err()
        );
    }

    #[test]
    fn wider_kernel_lowers_peak() {
        let ens = mc_propagate(&prior(), &Duffing::default(), 0.0, 2000, 2, MC_TOL).unwrap();
        let axes = vec![linspace(-0.5, 1.5, 101), linspace(-0.5, 1.5, 101)];
        let (narrow, h) = density_estimate(&ens, axes.clone(), &Bandwidth::Silverman).unwrap();
        let wide_h: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        let (wide, _) = density_estimate(&ens, axes, &Bandwidth::Fixed(wide_h)).unwrap();
        assert!(wide.max() < narrow.max());
    }

    #[test]
    fn silverman_estimate_of_standard_gaussian() {
        // The smoothing bias (a KDE in expectation is N(0, 1+h²)) stays under 5%
        // inside 2σ. On top of it each grid value carries sampling noise with
        // relative standard deviation √(R(K)/(N h² f)), R(K) = 1/(4π); near the
        // 2σ rim that is about 2%, so the band allows four standard deviations.
        let std = GaussianPdf::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        let count = 1_000_000;
        let ens = mc_propagate(&std, &Duffing::default(), 0.0, count, 21, MC_TOL).unwrap();
        let axes = vec![linspace(-6.0, 6.0, 121), linspace(-6.0, 6.0, 121)];
        let (kde, h) = density_estimate(&ens, axes.clone(), &Bandwidth::Silverman).unwrap();
        let exact = evaluate_on_grid(GridFunction::Density(&std), axes, false).unwrap();
        let mut worst_bias = 0.0f64;
        for k in 0..kde.len() {
            let x = kde.point(k);
            let r2 = x[0] * x[0] + x[1] * x[1];
            if r2 > 4.0 {
                continue;
            }
            let e = exact.values()[k];
            let smoothed: f64 = (0..2)
                .map(|d| {
                    let s2 = 1.0 + h[d] * h[d];
                    (-0.5 * x[d] * x[d] / s2).exp() / (2.0 * PI * s2).sqrt()
                })
                .product();
            let bias = (smoothed - e).abs() / e;
            worst_bias = worst_bias.max(bias);
            let noise = (1.0 / (4.0 * PI * count as f64 * h[0] * h[1] * e)).sqrt();
            let err = (kde.values()[k] - e).abs() / e;
            assert!(
                err < bias + 4.0 * noise,
                "at {x:?}: {err} vs bias {bias} noise {noise}"
            );
        }
        assert!(worst_bias < 0.05, "{worst_bias}");
        assert_relative_eq!(std.density(&[0.0, 0.0]), exact.max(), epsilon = 1e-15);
    }
}

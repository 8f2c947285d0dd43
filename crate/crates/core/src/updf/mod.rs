//! Probability densities and their propagation through Koopman flow maps:
//! as an observable (`H_p` row), by evaluating the prior through the inverse
//! map, and the log-density variant of the latter.

mod grid;
mod poly;

pub use grid::{evaluate_on_grid, linspace, GridEvaluation, GridFunction, GridMeta};
pub use poly::{eval_monomials, FitDiagnostics, PolyLogPdf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, BoxDomain, Quadrature};
use crate::error::{Error, Result};
use crate::koopman::{observable_matrix_galerkin, FlowMap, KoopmanModel};

/// A density evaluable anywhere in state space.
pub trait Density: Sync {
    fn dim(&self) -> usize;
    fn density(&self, x: &[f64]) -> f64;
}

/// A log-density, possibly known only up to an additive constant.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

/// Covariance matrices worse conditioned than this are rejected.
pub const MAX_COVARIANCE_CONDITION: f64 = 1e12;

/// Multivariate normal density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianSpec", into = "GaussianSpec")]
pub struct GaussianPdf {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianSpec {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl TryFrom<GaussianSpec> for GaussianPdf {
    type Error = Error;

    fn try_from(s: GaussianSpec) -> Result<Self> {
        let n = s.mean.len();
        if s.covariance.len() != n || s.covariance.iter().any(|r| r.len() != n) {
            return Err(Error::invalid(
                "covariance must be n×n for an n-dimensional mean",
            ));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| s.covariance[i][j]);
        GaussianPdf::new(s.mean, cov)
    }
}

impl From<GaussianPdf> for GaussianSpec {
    fn from(g: GaussianPdf) -> Self {
        Self {
            mean: g.mean.iter().copied().collect(),
            covariance: g
                .covariance
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

impl GaussianPdf {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::invalid(
                "covariance must be n×n for an n-dimensional mean",
            ));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("Gaussian parameters must be finite"));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 * covariance.amax() {
            return Err(Error::invalid("covariance must be symmetric"));
        }
        let eig = covariance.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if lo <= 0.0 {
            return Err(Error::invalid(format!(
                "covariance must be positive definite (smallest eigenvalue {lo:e})"
            )));
        }
        let condition = hi / lo;
        if condition > MAX_COVARIANCE_CONDITION {
            return Err(Error::IllConditioned {
                what: "covariance",
                condition,
            });
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_norm = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            mean: DVector::from_vec(mean),
            precision: chol.inverse(),
            covariance,
            log_norm,
        })
    }

    /// `N(mean, σ² I)`.
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("standard deviation must be positive"));
        }
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n) * (sigma * sigma))
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `−½ (x−μ)ᵀ P⁻¹ (x−μ)`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let n = self.mean.len();
        let mut q = 0.0;
        for i in 0..n {
            let di = x[i] - self.mean[i];
            for j in 0..n {
                q += di * self.precision[(i, j)] * (x[j] - self.mean[j]);
            }
        }
        -0.5 * q
    }

    /// Bounding box of `{x : quadratic_form(x) ≥ −depth}`.
    pub fn credible_box(&self, depth: f64) -> BoxDomain {
        let lower = (0..self.mean.len())
            .map(|i| self.mean[i] - (2.0 * depth * self.covariance[(i, i)]).sqrt())
            .collect();
        let upper = (0..self.mean.len())
            .map(|i| self.mean[i] + (2.0 * depth * self.covariance[(i, i)]).sqrt())
            .collect();
        BoxDomain::new(lower, upper).expect("positive variances give a proper box")
    }
}

impl Density for GaussianPdf {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn density(&self, x: &[f64]) -> f64 {
        (self.log_norm + self.quadratic_form(x)).exp()
    }
}

impl LogDensity for GaussianPdf {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_norm + self.quadratic_form(x)
    }
}

/// Log-density depth defining the support region of a log-density.
pub const SUPPORT_DEPTH: f64 = 25.0;

/// Quadratic log-density `−½(x−μ)ᵀP⁻¹(x−μ)` of a Gaussian, zero at the mean,
/// as an order-2 polynomial.
pub fn log_gaussian(g: &GaussianPdf) -> Result<PolyLogPdf> {
    let n = g.mean.len();
    let q = &g.precision;
    let mu = &g.mean;
    let qmu = q * mu;
    let indices = crate::basis::enumerate_indices(n, 2);
    let coefficients = indices
        .iter()
        .map(|idx| {
            let e = idx.exponents();
            let nonzero: Vec<usize> = (0..n).filter(|&d| e[d] > 0).collect();
            match (idx.total_degree(), nonzero.as_slice()) {
                (0, _) => -0.5 * mu.dot(&qmu),
                (1, [i]) => qmu[*i],
                (2, [i]) => -0.5 * q[(*i, *i)],
                (2, [i, j]) => -0.5 * (q[(*i, *j)] + q[(*j, *i)]),
                _ => unreachable!("order-2 index"),
            }
        })
        .collect();
    PolyLogPdf::new(2, coefficients, g.credible_box(SUPPORT_DEPTH), true)
}

/// Galerkin coefficients `H_p,j = ⟨ψ, ℒ_j⟩` of a density (a 1×η row).
pub fn pdf_observable_row(
    pdf: &dyn Density,
    basis: &BasisSet,
    quad: &Quadrature,
) -> Result<DMatrix<f64>> {
    if pdf.dim() != basis.dim() {
        return Err(Error::invalid("density and basis dimensions differ"));
    }
    observable_matrix_galerkin(|x, out| out[0] = pdf.density(x), 1, basis, quad)
}

fn state_map(model: &KoopmanModel, dim: usize, dt: f64) -> Result<FlowMap> {
    if model.observable().nrows() != model.basis().dim() || dim != model.basis().dim() {
        return Err(Error::invalid(
            "inverse-map propagation needs a state observable matching the density dimension",
        ));
    }
    Ok(model.inverse_map(dt))
}

/// The density carried as a Koopman observable, `ψ(·, t_f) = H_p V⁻¹ e^{−ΔtΛ} V ℒ`.
/// Densities are transported against the flow, `ψ(x, t_f) = ψ(𝒲(x), t₀)`, so
/// the observable is evolved over `−Δt`. Values are reported raw and may be
/// negative where the truncated expansion undershoots.
pub struct ObservableRouteDensity {
    map: FlowMap,
    dim: usize,
}

impl ObservableRouteDensity {
    pub fn new(model: &KoopmanModel, h_p: &DMatrix<f64>, dt: f64) -> Result<Self> {
        if h_p.nrows() != 1 || h_p.ncols() != model.basis().size() {
            return Err(Error::invalid("H_p must be a 1×η row on the model's basis"));
        }
        Ok(Self {
            map: FlowMap::new(model, h_p, -dt),
            dim: model.basis().dim(),
        })
    }

    pub fn flow_map(&self) -> &FlowMap {
        &self.map
    }
}

impl Density for ObservableRouteDensity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn density(&self, x: &[f64]) -> f64 {
        self.map.apply(x)[0]
    }
}

/// `ψ(x, t_f) = ψ(𝒲(x), t₀)`, the prior evaluated through the inverted flow.
pub struct InverseMapDensity<'a> {
    prior: &'a dyn Density,
    map: FlowMap,
}

impl<'a> InverseMapDensity<'a> {
    pub fn new(model: &KoopmanModel, prior: &'a dyn Density, dt: f64) -> Result<Self> {
        Ok(Self {
            map: state_map(model, prior.dim(), dt)?,
            prior,
        })
    }

    pub fn flow_map(&self) -> &FlowMap {
        &self.map
    }
}

impl Density for InverseMapDensity<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn density(&self, x: &[f64]) -> f64 {
        self.prior.density(&self.map.apply(x))
    }
}

/// `ζ(x, t_f) ≐ ζ(𝒲(x), t₀)`.
pub struct InverseMapLogDensity<'a> {
    prior: &'a dyn LogDensity,
    map: FlowMap,
}

impl<'a> InverseMapLogDensity<'a> {
    pub fn new(model: &KoopmanModel, prior: &'a dyn LogDensity, dt: f64) -> Result<Self> {
        Ok(Self {
            map: state_map(model, prior.dim(), dt)?,
            prior,
        })
    }

    pub fn flow_map(&self) -> &FlowMap {
        &self.map
    }
}

impl LogDensity for InverseMapLogDensity<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.prior.log_density(&self.map.apply(x))
    }
}

/// Single-point form of [`ObservableRouteDensity`].
pub fn propagate_pdf_observable(
    model: &KoopmanModel,
    h_p: &DMatrix<f64>,
    dt: f64,
    x: &[f64],
) -> Result<f64> {
    Ok(ObservableRouteDensity::new(model, h_p, dt)?.density(x))
}

/// Single-point form of [`InverseMapDensity`].
pub fn propagate_pdf_inverse(
    model: &KoopmanModel,
    prior: &dyn Density,
    dt: f64,
    x: &[f64],
) -> Result<f64> {
    Ok(InverseMapDensity::new(model, prior, dt)?.density(x))
}

/// Single-point form of [`InverseMapLogDensity`].
pub fn propagate_logpdf_inverse(
    model: &KoopmanModel,
    zeta: &dyn LogDensity,
    dt: f64,
    x: &[f64],
) -> Result<f64> {
    Ok(InverseMapLogDensity::new(model, zeta, dt)?.log_density(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Duffing;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn prior() -> GaussianPdf {
        GaussianPdf::isotropic(vec![0.4, 0.6], 0.1).unwrap()
    }

    fn model(sys: &Duffing, order: usize) -> KoopmanModel {
        let b = BasisSet::new(BoxDomain::cube(2, -1.5, 1.5).unwrap(), order);
        let q = Quadrature::for_basis(&b);
        KoopmanModel::galerkin(sys, b, &q).unwrap()
    }

    /// `N(Rμ, RPRᵀ)` for the unit-frequency rotation flow over `t`.
    fn rotated(g: &GaussianPdf, t: f64) -> GaussianPdf {
        let r = DMatrix::from_row_slice(2, 2, &[t.cos(), t.sin(), -t.sin(), t.cos()]);
        let m = &r * g.mean();
        let c = &r * g.covariance() * r.transpose();
        let c = (&c + c.transpose()) * 0.5;
        GaussianPdf::new(m.iter().copied().collect(), c).unwrap()
    }

    #[test]
    fn gaussian_normalization_and_validation() {
        let g = GaussianPdf::isotropic(vec![0.0, 0.0], 2.0).unwrap();
        assert_relative_eq!(
            g.density(&[0.0, 0.0]),
            1.0 / (2.0 * PI * 4.0),
            epsilon = 1e-15
        );
        assert!(GaussianPdf::new(
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])
        )
        .is_err());
        assert!(GaussianPdf::new(
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])
        )
        .is_err());
        let thin = GaussianPdf::new(
            vec![0.0, 0.0],
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-13])),
        );
        assert!(matches!(thin, Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn gaussian_json_round_trip() {
        let g = GaussianPdf::new(
            vec![0.1, -0.2],
            DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]),
        )
        .unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: GaussianPdf = serde_json::from_str(&text).unwrap();
        assert_eq!(back.mean(), g.mean());
        assert_eq!(back.covariance(), g.covariance());
    }

    #[test]
    fn log_gaussian_examples() {
        let z = log_gaussian(&prior()).unwrap();
        assert!(z.modulo_constant());
        assert_eq!(z.order(), 2);
        assert_relative_eq!(z.eval(&[0.4, 0.6]), 0.0, epsilon = 1e-12);
        assert_relative_eq!(z.eval(&[0.5, 0.6]), -0.5, epsilon = 1e-12);
        assert_relative_eq!(z.eval(&[0.5, 0.7]), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn log_gaussian_matches_quadratic_form_with_correlation() {
        let g = GaussianPdf::new(
            vec![0.3, -0.1],
            DMatrix::from_row_slice(2, 2, &[0.04, 0.015, 0.015, 0.09]),
        )
        .unwrap();
        let z = log_gaussian(&g).unwrap();
        for x in [[0.0, 0.0], [1.0, -1.0], [0.35, 0.2]] {
            assert_relative_eq!(z.eval(&x), g.quadratic_form(&x), epsilon = 1e-12);
        }
        // the support box holds the depth-25 ellipse
        let r = z.region();
        assert_relative_eq!(r.upper()[0], 0.3 + (50.0f64 * 0.04).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn uniform_density_projects_to_constant_row() {
        struct Uniform(f64);
        impl Density for Uniform {
            fn dim(&self) -> usize {
                2
            }
            fn density(&self, _x: &[f64]) -> f64 {
                self.0
            }
        }
        let b = BasisSet::new(BoxDomain::cube(2, -1.5, 1.5).unwrap(), 4);
        let q = Quadrature::for_basis(&b);
        let vol = b.domain().volume();
        let h = pdf_observable_row(&Uniform(1.0 / vol), &b, &q).unwrap();
        assert_relative_eq!(h[(0, 0)], 1.0 / vol, epsilon = 1e-14);
        assert!(h.columns_range(1..).amax() < 1e-14);
    }

    /// `√(2k+1) P_k(t)` for `k ≤ order` by Bonnet's recursion.
    fn legendre_column(order: usize, t: f64) -> Vec<f64> {
        let mut p = vec![1.0, t];
        for k in 1..order {
            let kf = k as f64;
            p.push(((2.0 * kf + 1.0) * t * p[k] - kf * p[k - 1]) / (kf + 1.0));
        }
        p.truncate(order + 1);
        p.iter()
            .enumerate()
            .map(|(k, v)| v * (2.0 * k as f64 + 1.0).sqrt())
            .collect()
    }

    /// Exact total-degree projection of the separable prior, with each 1-D
    /// coefficient integrated by composite Simpson on 20 001 points.
    fn projected_prior_at(order: usize, x: [f64; 2]) -> f64 {
        let n = 20_000;
        let mut coeffs = [vec![0.0; order + 1], vec![0.0; order + 1]];
        for (d, mu) in [0.4, 0.6].into_iter().enumerate() {
            for i in 0..=n {
                let t = -1.0 + 2.0 * i as f64 / n as f64;
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let z = (1.5 * t - mu) / 0.1;
                let f = (-0.5 * z * z).exp() / (0.1 * (2.0 * PI).sqrt());
                for (k, l) in legendre_column(order, t).into_iter().enumerate() {
                    // (1/2)∫ f ℒ_k dt with Simpson step 2/n
                    coeffs[d][k] += 0.5 * w * (2.0 / n as f64) / 3.0 * f * l;
                }
            }
        }
        let l0 = legendre_column(order, x[0] / 1.5);
        let l1 = legendre_column(order, x[1] / 1.5);
        let mut total = 0.0;
        for i in 0..=order {
            for j in 0..=(order - i) {
                total += coeffs[0][i] * coeffs[1][j] * l0[i] * l1[j];
            }
        }
        total
    }

    #[test]
    fn observable_row_matches_exact_projection() {
        let b = BasisSet::new(BoxDomain::cube(2, -1.5, 1.5).unwrap(), 9);
        let q = Quadrature::for_basis(&b);
        let p = prior();
        let h = pdf_observable_row(&p, &b, &q).unwrap();
        let peak = projected_prior_at(9, [0.4, 0.6]);
        for x in [[0.4, 0.6], [0.0, 0.0], [0.5, 0.5], [-1.0, 1.2]] {
            let rec = (&h * b.eval(&x).values)[0];
            let exact = projected_prior_at(9, x);
            // the default rule under-resolves σ = 0.1, so only to a few percent
            assert!((rec - exact).abs() < 0.05 * peak, "{x:?}: {rec} vs {exact}");
        }
        // at order 9 the truncated series reaches only ~16% of the true peak
        assert!(peak < 0.2 * p.density(&[0.4, 0.6]));
    }

    #[test]
    fn zero_duration_propagation_is_exact() {
        let m = model(&Duffing::default(), 5);
        let p = prior();
        let z = log_gaussian(&p).unwrap();
        for x in [[0.4, 0.6], [0.1, -0.3], [1.0, 1.2]] {
            let d = propagate_pdf_inverse(&m, &p, 0.0, &x).unwrap();
            assert_relative_eq!(d, p.density(&x), max_relative = 1e-10);
            let l = propagate_logpdf_inverse(&m, &z, 0.0, &x).unwrap();
            assert_relative_eq!(l, z.eval(&x), epsilon = 1e-9);
        }
    }

    #[test]
    fn observable_route_transports_against_the_flow() {
        // polynomial spaces are invariant under a linear flow, so the
        // propagated expansion is exactly the prior's expansion at Φ(−t)x
        let m = model(&Duffing::harmonic(), 6);
        let q = Quadrature::for_basis(m.basis());
        let h_p = pdf_observable_row(
            &GaussianPdf::isotropic(vec![0.4, 0.6], 0.4).unwrap(),
            m.basis(),
            &q,
        )
        .unwrap();
        let t = PI / 2.0;
        for x in [[0.3, -0.2], [-0.6, 0.9], [1.0, 0.1]] {
            let back = [
                x[0] * t.cos() - x[1] * t.sin(),
                x[0] * t.sin() + x[1] * t.cos(),
            ];
            let want = (&h_p * m.basis().eval(&back).values)[0];
            let got = propagate_pdf_observable(&m, &h_p, t, &x).unwrap();
            assert_relative_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn harmonic_inverse_map_gives_rotated_gaussian() {
        let m = model(&Duffing::harmonic(), 1);
        let p = prior();
        for dt in [PI / 4.0, PI / 2.0, 1.0, PI] {
            let exact = rotated(&p, dt);
            let prop = InverseMapDensity::new(&m, &p, dt).unwrap();
            for x in [[0.4, 0.6], [0.6, -0.4], [-0.45, 0.5], [0.2, 0.2]] {
                let want = exact.density(&x);
                let got = prop.density(&x);
                assert!(
                    (got - want).abs() <= 1e-6 * want.max(1e-300),
                    "Δt={dt} x={x:?}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn state_observable_required_for_inverse_map() {
        let m = model(&Duffing::default(), 3);
        let h1 = m.observable().rows(0, 1).into_owned();
        let m1 = m.with_observable(h1).unwrap();
        assert!(InverseMapDensity::new(&m1, &prior(), 1.0).is_err());
    }
}

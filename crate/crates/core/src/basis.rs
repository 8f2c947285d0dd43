//! Orthonormal multivariate Legendre bases on a box, tensor Gauss–Legendre
//! quadrature and the weighted inner product they share.
//!
//! The weight is the uniform probability density on the box, so the constant
//! basis function is exactly `1` and the Gram matrix of the basis is the
//! identity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lower, upper]` in state coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "box bounds must be non-empty and of equal length (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "box axis {i}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[lo, hi]^n`.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (b - a))
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| b - a)
            .product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Affine map into the reference cube `[-1, 1]^n`.
    pub fn to_reference(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (2.0 * v - lo - hi) / (hi - lo))
            .collect()
    }

    pub fn from_reference(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(s, (lo, hi))| 0.5 * (lo + hi) + 0.5 * (hi - lo) * s)
            .collect()
    }
}

/// Exponents of a multivariate monomial or tensor-product polynomial.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn total_degree(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn exponents(&self) -> &[usize] {
        &self.0
    }
}

/// All multi-indices in `n` variables with total degree at most `order`, in
/// graded lexicographic order: by degree, then by descending exponent of the
/// first variable, then the second, and so on. Index 0 is the zero index.
pub fn enumerate_indices(n: usize, order: usize) -> Vec<MultiIndex> {
    fn fill(rest: usize, n: usize, prefix: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
        if prefix.len() + 1 == n {
            prefix.push(rest);
            out.push(MultiIndex(prefix.clone()));
            prefix.pop();
            return;
        }
        for e in (0..=rest).rev() {
            prefix.push(e);
            fill(rest - e, n, prefix, out);
            prefix.pop();
        }
    }

    assert!(n >= 1, "dimension must be at least 1");
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(n);
    for degree in 0..=order {
        fill(degree, n, &mut prefix, &mut out);
    }
    out
}

/// Binomial coefficient `C(n, k)`.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Values and first derivatives of the normalized Legendre polynomials
/// `sqrt(2k+1) P_k(t)`, `k = 0..=order`, written into `values` and `derivs`.
pub fn normalized_legendre(order: usize, t: f64, values: &mut [f64], derivs: &mut [f64]) {
    // plain P_k and P'_k first, normalization applied at the end
    values[0] = 1.0;
    derivs[0] = 0.0;
    if order >= 1 {
        values[1] = t;
        derivs[1] = 1.0;
    }
    for k in 1..order {
        let kf = k as f64;
        values[k + 1] = ((2.0 * kf + 1.0) * t * values[k] - kf * values[k - 1]) / (kf + 1.0);
        derivs[k + 1] = derivs[k - 1] + (2.0 * kf + 1.0) * values[k];
    }
    for k in 0..=order {
        let s = ((2 * k + 1) as f64).sqrt();
        values[k] *= s;
        derivs[k] *= s;
    }
}

/// Basis values at a point, with optional gradients.
#[derive(Debug, Clone)]
pub struct BasisValues {
    pub values: DVector<f64>,
    /// `η × n`, derivatives with respect to the original coordinates.
    pub gradient: Option<DMatrix<f64>>,
    /// Set when the point lies outside the box; the values are extrapolated.
    pub outside_domain: bool,
}

/// Total-degree truncated tensor basis of normalized Legendre polynomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    domain: BoxDomain,
    order: usize,
    indices: Vec<MultiIndex>,
}

impl BasisSet {
    pub fn new(domain: BoxDomain, order: usize) -> Self {
        let indices = enumerate_indices(domain.dim(), order);
        Self {
            domain,
            order,
            indices,
        }
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Number of basis functions, `C(n + order, n)`.
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    /// Position of a multi-index in the ordering, if present.
    pub fn position(&self, index: &MultiIndex) -> Option<usize> {
        self.indices.iter().position(|m| m == index)
    }

    fn univariate_tables(&self, x: &[f64], with_derivs: bool) -> (Vec<f64>, Vec<f64>, bool) {
        let n = self.dim();
        let stride = self.order + 1;
        let mut vals = vec![0.0; n * stride];
        let mut ders = vec![0.0; n * stride];
        let mut outside = false;
        for d in 0..n {
            let lo = self.domain.lower[d];
            let hi = self.domain.upper[d];
            if x[d] < lo || x[d] > hi {
                outside = true;
            }
            let t = (2.0 * x[d] - lo - hi) / (hi - lo);
            let (v, dv) = (d * stride, (d + 1) * stride);
            normalized_legendre(self.order, t, &mut vals[v..dv], &mut ders[v..dv]);
            if with_derivs {
                let scale = 2.0 / (hi - lo);
                ders[v..dv].iter_mut().for_each(|z| *z *= scale);
            }
        }
        (vals, ders, outside)
    }

    /// Writes the basis values at `x` into `out` and returns whether `x` was
    /// outside the box.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        debug_assert_eq!(x.len(), self.dim());
        let stride = self.order + 1;
        let (vals, _, outside) = self.univariate_tables(x, false);
        for (slot, idx) in out.iter_mut().zip(&self.indices) {
            *slot = idx
                .0
                .iter()
                .enumerate()
                .map(|(d, &e)| vals[d * stride + e])
                .product();
        }
        outside
    }

    pub fn eval(&self, x: &[f64]) -> BasisValues {
        let mut values = DVector::zeros(self.size());
        let outside_domain = self.eval_into(x, values.as_mut_slice());
        BasisValues {
            values,
            gradient: None,
            outside_domain,
        }
    }

    pub fn eval_with_gradient(&self, x: &[f64]) -> BasisValues {
        let n = self.dim();
        let stride = self.order + 1;
        let (vals, ders, outside_domain) = self.univariate_tables(x, true);
        let mut values = DVector::zeros(self.size());
        let mut gradient = DMatrix::zeros(self.size(), n);
        for (i, idx) in self.indices.iter().enumerate() {
            values[i] = (0..n).map(|d| vals[d * stride + idx.0[d]]).product();
            for j in 0..n {
                gradient[(i, j)] = (0..n)
                    .map(|d| {
                        let k = d * stride + idx.0[d];
                        if d == j {
                            ders[k]
                        } else {
                            vals[k]
                        }
                    })
                    .product();
            }
        }
        BasisValues {
            values,
            gradient: Some(gradient),
            outside_domain,
        }
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, weights summing to 2.
pub fn gauss_legendre(points: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(points >= 1);
    let q = points;
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    for i in 0..q.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, t);
            for k in 1..q {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * t * p1 - kf * p0) / (kf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_q(t), p0 = P_{q-1}(t)
            dp = q as f64 * (t * p1 - p0) / (t * t - 1.0);
            let step = p1 / dp;
            t -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - t * t) * dp * dp);
        nodes[i] = -t;
        nodes[q - 1 - i] = t;
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
    }
    (nodes, weights)
}

/// Tensor Gauss–Legendre rule for the uniform probability weight on a box.
#[derive(Debug, Clone)]
pub struct Quadrature {
    domain: BoxDomain,
    points_per_dim: usize,
    /// One node per column, `n × Q`.
    nodes: DMatrix<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    pub fn gauss_legendre(domain: &BoxDomain, points_per_dim: usize) -> Self {
        let n = domain.dim();
        let (ref_nodes, ref_weights) = gauss_legendre(points_per_dim);
        let total = points_per_dim.pow(n as u32);
        let mut nodes = DMatrix::zeros(n, total);
        let mut weights = vec![0.0; total];
        let mut counter = vec![0usize; n];
        for k in 0..total {
            let mut w = 1.0;
            for d in 0..n {
                let lo = domain.lower[d];
                let hi = domain.upper[d];
                nodes[(d, k)] = 0.5 * (lo + hi) + 0.5 * (hi - lo) * ref_nodes[counter[d]];
                w *= 0.5 * ref_weights[counter[d]];
            }
            weights[k] = w;
            // last axis fastest
            for d in (0..n).rev() {
                counter[d] += 1;
                if counter[d] < points_per_dim {
                    break;
                }
                counter[d] = 0;
            }
        }
        Self {
            domain: domain.clone(),
            points_per_dim,
            nodes,
            weights,
        }
    }

    /// Default rule for a basis of the given order: `2·order + 2` points per axis.
    pub fn for_basis(basis: &BasisSet) -> Self {
        Self::gauss_legendre(basis.domain(), 2 * basis.order() + 2)
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> &[f64] {
        let n = self.nodes.nrows();
        &self.nodes.as_slice()[k * n..(k + 1) * n]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ_k w_k f(x_k)`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|k| self.weights[k] * f(self.node(k)))
            .sum()
    }
}

/// `⟨f, g⟩ = ∫ f g w dx` evaluated with the quadrature rule.
pub fn inner_product(
    f: impl Fn(&[f64]) -> f64,
    g: impl Fn(&[f64]) -> f64,
    quad: &Quadrature,
) -> f64 {
    quad.integrate(|x| f(x) * g(x))
}

/// Gram matrix `⟨ℒ_i, ℒ_j⟩` of a basis under a quadrature rule.
pub fn gram_matrix(basis: &BasisSet, quad: &Quadrature) -> DMatrix<f64> {
    let eta = basis.size();
    let mut gram = DMatrix::zeros(eta, eta);
    let mut v = DVector::zeros(eta);
    for k in 0..quad.len() {
        basis.eval_into(quad.node(k), v.as_mut_slice());
        gram.ger(quad.weights()[k], &v, &v, 1.0);
    }
    gram
}

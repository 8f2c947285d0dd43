use serde::{Deserialize, Serialize};

use super::LogDensity;
use crate::basis::{enumerate_indices, BoxDomain, MultiIndex};
use crate::error::{Error, Result};

/// Writes `x^e` for every multi-index of `indices` into `out`. `order` must
/// bound the total degree of all indices.
pub fn eval_monomials(indices: &[MultiIndex], order: usize, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let stride = order + 1;
    let mut powers = vec![1.0; n * stride];
    for d in 0..n {
        for k in 1..stride {
            powers[d * stride + k] = powers[d * stride + k - 1] * x[d];
        }
    }
    for (slot, idx) in out.iter_mut().zip(indices) {
        *slot = idx
            .0
            .iter()
            .enumerate()
            .map(|(d, &e)| powers[d * stride + e])
            .product();
    }
}

/// Quality figures of a least-squares reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDiagnostics {
    /// Samples used in the fit.
    pub fitted: usize,
    /// Samples held back for validation.
    pub held_out: usize,
    pub rank: usize,
    pub condition: f64,
    /// RMS residual over the fitted samples.
    pub residual_rms: f64,
    /// RMS error over the held-out samples.
    pub held_out_rms: f64,
    /// `held_out_rms` divided by the range of the sampled log-density.
    pub held_out_relative_rms: f64,
}

/// A log-density polynomial `ζ(x) = Σ c_k x^{e_k}` in state coordinates,
/// known only up to an additive constant when `modulo_constant` is set.
/// `region` is its support box. A bounded polynomial (a least-squares fit)
/// is only valid there and its density is zero outside; an unbounded one
/// (an exact Gaussian exponent) holds everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolyLogDocument", try_from = "PolyLogDocument")]
pub struct PolyLogPdf {
    order: usize,
    indices: Vec<MultiIndex>,
    coefficients: Vec<f64>,
    region: BoxDomain,
    modulo_constant: bool,
    bounded: bool,
    diagnostics: Option<FitDiagnostics>,
}

impl PolyLogPdf {
    /// `coefficients` follow the graded-lex monomial order of total degree
    /// up to `order`.
    pub fn new(
        order: usize,
        coefficients: Vec<f64>,
        region: BoxDomain,
        modulo_constant: bool,
    ) -> Result<Self> {
        let indices = enumerate_indices(region.dim(), order);
        if coefficients.len() != indices.len() {
            return Err(Error::invalid(format!(
                "order {order} in {} variables has {} monomials, got {} coefficients",
                region.dim(),
                indices.len(),
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("log-density coefficients must be finite"));
        }
        Ok(Self {
            order,
            indices,
            coefficients,
            region,
            modulo_constant,
            bounded: false,
            diagnostics: None,
        })
    }

    /// Marks the polynomial as valid on its region only.
    pub fn bounded(mut self) -> Self {
        self.bounded = true;
        self
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    pub fn with_diagnostics(mut self, diagnostics: FitDiagnostics) -> Self {
        self.diagnostics = Some(diagnostics);
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn region(&self) -> &BoxDomain {
        &self.region
    }

    pub fn modulo_constant(&self) -> bool {
        self.modulo_constant
    }

    pub fn diagnostics(&self) -> Option<&FitDiagnostics> {
        self.diagnostics.as_ref()
    }

    /// Coefficient of one monomial, zero if absent.
    pub fn coefficient(&self, exponents: &[usize]) -> f64 {
        self.indices
            .iter()
            .position(|m| m.0 == exponents)
            .map_or(0.0, |k| self.coefficients[k])
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut mono = vec![0.0; self.indices.len()];
        eval_monomials(&self.indices, self.order, x, &mut mono);
        mono.iter()
            .zip(&self.coefficients)
            .map(|(m, c)| m * c)
            .sum()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// A bounded polynomial gives a zero density outside its region, where a fit
/// carries no information and may grow without bound.
impl LogDensity for PolyLogPdf {
    fn dim(&self) -> usize {
        self.region.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        if !self.bounded || self.region.contains(x) {
            self.eval(x)
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Term {
    exponents: MultiIndex,
    coefficient: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolyLogDocument {
    order: usize,
    terms: Vec<Term>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    modulo_constant: bool,
    #[serde(default)]
    bounded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diagnostics: Option<FitDiagnostics>,
}

impl From<PolyLogPdf> for PolyLogDocument {
    fn from(p: PolyLogPdf) -> Self {
        Self {
            order: p.order,
            terms: p
                .indices
                .into_iter()
                .zip(p.coefficients)
                .map(|(exponents, coefficient)| Term {
                    exponents,
                    coefficient,
                })
                .collect(),
            lower: p.region.lower().to_vec(),
            upper: p.region.upper().to_vec(),
            modulo_constant: p.modulo_constant,
            bounded: p.bounded,
            diagnostics: p.diagnostics,
        }
    }
}

impl TryFrom<PolyLogDocument> for PolyLogPdf {
    type Error = Error;

    fn try_from(doc: PolyLogDocument) -> Result<Self> {
        let region = BoxDomain::new(doc.lower, doc.upper)?;
        let indices = enumerate_indices(region.dim(), doc.order);
        let mut coefficients = vec![0.0; indices.len()];
        for t in doc.terms {
            let k = indices
                .iter()
                .position(|m| *m == t.exponents)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "term {:?} exceeds order {}",
                        t.exponents.0, doc.order
                    ))
                })?;
            coefficients[k] = t.coefficient;
        }
        let mut p = Self::new(doc.order, coefficients, region, doc.modulo_constant)?;
        p.bounded = doc.bounded;
        p.diagnostics = doc.diagnostics;
        Ok(p)
    }
}

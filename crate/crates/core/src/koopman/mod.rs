//! Koopman matrices (Galerkin and EDMD), their eigendecomposition and the
//! polynomial flow maps `H V⁻¹ exp(ΔtΛ) V ℒ(x)` built from them.

mod edmd;
mod flow;
mod galerkin;

pub use edmd::{edmd_koopman, observable_matrix_edmd, LeastSquaresFit};
pub use flow::{forward_flow, inverse_flow, lifted_propagator, FlowMap, LEAKAGE_TOL};
pub use galerkin::{galerkin_koopman, identity_observable_galerkin, observable_matrix_galerkin};

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, BoxDomain, MultiIndex, Quadrature};
use crate::dynamics::{Dynamics, SnapshotSet};
use crate::error::{Error, Result};
use crate::linalg;

/// Eigendecompositions whose eigenvector matrix is worse conditioned than
/// this are rejected.
pub const MAX_EIGENVECTOR_CONDITION: f64 = 1e12;

/// Relative residual `‖VK − ΛV‖_F / ‖K‖_F` above which a matrix is treated
/// as defective.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-8;

/// Eigenvalues closer than this (relative to `‖K‖_F`) are treated as one
/// repeated eigenvalue.
const CLUSTER_TOL: f64 = 1e-9;

/// Left eigendecomposition `V K = Λ V`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Eigenvalues `λ_k`, conjugate pairs adjacent.
    pub values: DVector<Complex64>,
    /// Left eigenvectors, one unit-norm row per eigenvalue.
    pub left: DMatrix<Complex64>,
    /// `V⁻¹`.
    pub left_inverse: DMatrix<Complex64>,
    /// 2-norm condition number of `V`.
    pub condition: f64,
    /// `‖VK − ΛV‖_F / ‖K‖_F` of the matrix that was decomposed.
    pub residual: f64,
}

/// Left eigenvectors and eigenvalues of a real square matrix.
pub fn eigendecompose(k: &DMatrix<f64>) -> Result<Spectrum> {
    let (mut values, right_of_transpose) = linalg::eigen_real(&k.transpose())?;
    let mut left = right_of_transpose.transpose();
    resolve_repeated(k, &mut values, &mut left);
    for mut row in left.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= Complex64::new(norm, 0.0);
        }
    }
    let ck = linalg::to_complex(k);
    let mut r = &left * &ck;
    for (i, lam) in values.iter().enumerate() {
        let lv = left.row(i) * *lam;
        let mut row = r.row_mut(i);
        row -= lv;
    }
    let scale = k.norm().max(f64::MIN_POSITIVE);
    let residual = r.norm() / scale;
    if residual > EIGEN_RESIDUAL_TOL && r.norm() > 1e-14 {
        return Err(Error::Eigen(format!(
            "matrix appears defective: relative residual ‖VK − ΛV‖ = {residual:e}"
        )));
    }
    let condition = linalg::complex_condition(&left);
    if condition > MAX_EIGENVECTOR_CONDITION {
        return Err(Error::IllConditioned {
            what: "eigenvector matrix",
            condition,
        });
    }
    let left_inverse = linalg::complex_inverse(&left).ok_or(Error::IllConditioned {
        what: "eigenvector matrix",
        condition: f64::INFINITY,
    })?;
    Ok(Spectrum {
        values,
        left,
        left_inverse,
        condition,
        residual,
    })
}

/// Replaces the eigenvectors of each repeated eigenvalue by an orthonormal
/// basis of the left null space of `K − λI`. Eigenvectors from the Schur
/// back-substitution are unreliable there; a defective cluster shows up as
/// a large residual afterwards.
fn resolve_repeated(
    k: &DMatrix<f64>,
    values: &mut DVector<Complex64>,
    left: &mut DMatrix<Complex64>,
) {
    let n = values.len();
    let tol = CLUSTER_TOL * k.norm().max(f64::MIN_POSITIVE);
    let mut cluster = vec![usize::MAX; n];
    let mut count = 0;
    for i in 0..n {
        if cluster[i] != usize::MAX {
            continue;
        }
        cluster[i] = count;
        // grow transitively so chains of close values form one cluster
        let mut stack = vec![i];
        while let Some(a) = stack.pop() {
            for b in 0..n {
                if cluster[b] == usize::MAX && (values[a] - values[b]).norm() <= tol {
                    cluster[b] = count;
                    stack.push(b);
                }
            }
        }
        count += 1;
    }
    let kt = linalg::to_complex(&k.transpose());
    for c in 0..count {
        let members: Vec<usize> = (0..n).filter(|&i| cluster[i] == c).collect();
        if members.len() < 2 {
            continue;
        }
        let lambda = members.iter().map(|&i| values[i]).sum::<Complex64>() / members.len() as f64;
        let mut shifted = kt.clone();
        for d in 0..n {
            shifted[(d, d)] -= lambda;
        }
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        for (&i, &j) in members.iter().zip(&order) {
            values[i] = lambda;
            // (Kᵀ − λI) v = 0 for v = conj(row j of Vᴴ)ᵀ, and the left eigenvector is vᵀ
            for d in 0..n {
                left[(i, d)] = v_t[(j, d)].conj();
            }
        }
    }
}

/// Principal logarithm of an eigenvalue, refusing the closed negative real axis.
fn principal_log(mu: Complex64) -> Result<Complex64> {
    let on_cut = mu.norm() == 0.0 || (mu.re < 0.0 && mu.im.abs() <= 1e-8 * mu.norm());
    if on_cut {
        return Err(Error::BranchCut {
            re: mu.re,
            im: mu.im,
        });
    }
    Ok(mu.ln())
}

/// Turns the spectrum of a discrete step matrix into the spectrum of its
/// generator and returns the real generator `V⁻¹ (log μ / Δt) V`.
fn continuous_from_discrete(spec: &mut Spectrum, dt: f64) -> Result<DMatrix<f64>> {
    if dt == 0.0 || !dt.is_finite() {
        return Err(Error::invalid(
            "discrete-to-continuous conversion needs a finite, non-zero Δt",
        ));
    }
    for v in spec.values.iter_mut() {
        *v = principal_log(*v)? / dt;
    }
    let mut scaled = spec.left_inverse.clone();
    for (k, lam) in spec.values.iter().enumerate() {
        let mut col = scaled.column_mut(k);
        col *= *lam;
    }
    Ok((scaled * &spec.left).map(|z| z.re))
}

/// Continuous-time generator `K = log(K̃)/Δt` of a discrete Koopman matrix,
/// computed through the eigendecomposition.
pub fn discrete_to_continuous(discrete: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let mut spec = eigendecompose(discrete)?;
    continuous_from_discrete(&mut spec, dt)
}

/// How a model's Koopman matrix was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Galerkin { quadrature_points: usize },
    Edmd { samples: usize, dt: f64, seed: u64 },
}

impl Provenance {
    pub fn label(&self) -> &'static str {
        match self {
            Provenance::Galerkin { .. } => "galerkin",
            Provenance::Edmd { .. } => "edmd",
        }
    }
}

/// A Koopman generator with its eigendecomposition and observable matrix.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    basis: BasisSet,
    generator: DMatrix<f64>,
    spectrum: Spectrum,
    observable: DMatrix<f64>,
    provenance: Provenance,
}

impl KoopmanModel {
    /// Model from a continuous-time generator `K` and observable matrix `H`.
    pub fn from_generator(
        basis: BasisSet,
        generator: DMatrix<f64>,
        observable: DMatrix<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        check_shapes(&basis, &generator, &observable)?;
        let spectrum = eigendecompose(&generator)?;
        Ok(Self {
            basis,
            generator,
            spectrum,
            observable,
            provenance,
        })
    }

    /// Model from a discrete step matrix `K̃` sampled at `dt`. The spectrum is
    /// taken from `K̃` directly and mapped through the principal logarithm.
    pub fn from_discrete(
        basis: BasisSet,
        discrete: &DMatrix<f64>,
        dt: f64,
        observable: DMatrix<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        check_shapes(&basis, discrete, &observable)?;
        let mut spectrum = eigendecompose(discrete)?;
        let generator = continuous_from_discrete(&mut spectrum, dt)?;
        Ok(Self {
            basis,
            generator,
            spectrum,
            observable,
            provenance,
        })
    }

    /// Galerkin model with the identity observable.
    pub fn galerkin(sys: &dyn Dynamics, basis: BasisSet, quad: &Quadrature) -> Result<Self> {
        let k = galerkin_koopman(sys, &basis, quad)?;
        let h = identity_observable_galerkin(&basis, quad)?;
        Self::from_generator(
            basis,
            k,
            h,
            Provenance::Galerkin {
                quadrature_points: quad.points_per_dim(),
            },
        )
    }

    /// EDMD model with the identity observable fitted on the same snapshots.
    pub fn edmd(snap: &SnapshotSet, basis: BasisSet) -> Result<Self> {
        let k = edmd_koopman(snap, &basis)?;
        let h = observable_matrix_edmd(snap, &snap.x, &basis)?;
        Self::from_discrete(
            basis,
            &k.matrix,
            snap.dt,
            h.matrix,
            Provenance::Edmd {
                samples: snap.len(),
                dt: snap.dt,
                seed: snap.seed,
            },
        )
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    /// Continuous-time generator `K`.
    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn eigenvalues(&self) -> &DVector<Complex64> {
        &self.spectrum.values
    }

    /// Observable matrix `H` (γ × η).
    pub fn observable(&self) -> &DMatrix<f64> {
        &self.observable
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Same dynamics with a different observable matrix.
    pub fn with_observable(&self, observable: DMatrix<f64>) -> Result<Self> {
        check_shapes(&self.basis, &self.generator, &observable)?;
        Ok(Self {
            observable,
            ..self.clone()
        })
    }

    /// Flow map of the model's observable over a signed duration.
    pub fn flow_map(&self, dt: f64) -> FlowMap {
        FlowMap::new(self, &self.observable, dt)
    }

    /// Inverted map `𝒲_{t_f → t_0}` for a forward duration `dt`.
    pub fn inverse_map(&self, dt: f64) -> FlowMap {
        FlowMap::new(self, &self.observable, -dt)
    }

    pub fn to_document(&self) -> KoopmanDocument {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        KoopmanDocument {
            basis: BasisDocument {
                dim: self.basis.dim(),
                order: self.basis.order(),
                lower: self.basis.domain().lower().to_vec(),
                upper: self.basis.domain().upper().to_vec(),
                indices: self.basis.indices().to_vec(),
            },
            generator: rows(&self.generator),
            eigenvalues: self.spectrum.values.iter().map(|z| [z.re, z.im]).collect(),
            eigenvectors: self
                .spectrum
                .left
                .row_iter()
                .map(|r| r.iter().map(|z| [z.re, z.im]).collect())
                .collect(),
            eigenvector_condition: self.spectrum.condition,
            observable: rows(&self.observable),
            provenance: self.provenance.clone(),
        }
    }

    /// Rebuilds a model from its JSON document; `V⁻¹` is recomputed.
    pub fn from_document(doc: &KoopmanDocument) -> Result<Self> {
        let domain = BoxDomain::new(doc.basis.lower.clone(), doc.basis.upper.clone())?;
        let basis = BasisSet::new(domain, doc.basis.order);
        if basis.indices() != doc.basis.indices.as_slice() {
            return Err(Error::invalid("basis index list does not match its order"));
        }
        let eta = basis.size();
        let dense = |rows: &[Vec<f64>], what: &str| -> Result<DMatrix<f64>> {
            if rows.iter().any(|r| r.len() != eta) {
                return Err(Error::invalid(format!(
                    "{what} rows must have {eta} entries"
                )));
            }
            Ok(DMatrix::from_fn(rows.len(), eta, |i, j| rows[i][j]))
        };
        let generator = dense(&doc.generator, "generator")?;
        let observable = dense(&doc.observable, "observable")?;
        check_shapes(&basis, &generator, &observable)?;
        if doc.eigenvalues.len() != eta || doc.eigenvectors.len() != eta {
            return Err(Error::invalid("eigen data does not match basis size"));
        }
        let values = DVector::from_fn(eta, |i, _| {
            Complex64::new(doc.eigenvalues[i][0], doc.eigenvalues[i][1])
        });
        if doc.eigenvectors.iter().any(|r| r.len() != eta) {
            return Err(Error::invalid("eigenvector rows must have η entries"));
        }
        let left = DMatrix::from_fn(eta, eta, |i, j| {
            Complex64::new(doc.eigenvectors[i][j][0], doc.eigenvectors[i][j][1])
        });
        let left_inverse = linalg::complex_inverse(&left).ok_or(Error::IllConditioned {
            what: "eigenvector matrix",
            condition: f64::INFINITY,
        })?;
        Ok(Self {
            basis,
            generator,
            spectrum: Spectrum {
                values,
                condition: linalg::complex_condition(&left),
                residual: f64::NAN,
                left,
                left_inverse,
            },
            observable,
            provenance: doc.provenance.clone(),
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, &self.to_document())?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let doc: KoopmanDocument = serde_json::from_reader(std::fs::File::open(path)?)?;
        Self::from_document(&doc)
    }
}

fn check_shapes(basis: &BasisSet, k: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<()> {
    let eta = basis.size();
    if k.nrows() != eta || k.ncols() != eta {
        return Err(Error::invalid(format!(
            "Koopman matrix is {}x{}, basis has {eta} functions",
            k.nrows(),
            k.ncols()
        )));
    }
    if h.ncols() != eta || h.nrows() == 0 {
        return Err(Error::invalid(format!(
            "observable matrix is {}x{}, expected γx{eta}",
            h.nrows(),
            h.ncols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisDocument {
    pub dim: usize,
    pub order: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub indices: Vec<MultiIndex>,
}

/// JSON layout of a [`KoopmanModel`]. Matrices are row-major; complex numbers
/// are `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KoopmanDocument {
    pub basis: BasisDocument,
    pub generator: Vec<Vec<f64>>,
    pub eigenvalues: Vec<[f64; 2]>,
    pub eigenvectors: Vec<Vec<[f64; 2]>>,
    pub eigenvector_condition: f64,
    pub observable: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

/// Writes `re,im,source` rows for each labelled eigenvalue set.
pub fn write_eigenvalues_csv<W: Write>(out: W, sets: &[(&str, &DVector<Complex64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["re", "im", "source"])?;
    for (source, values) in sets {
        for z in values.iter() {
            w.write_record([
                format!("{:e}", z.re),
                format!("{:e}", z.im),
                source.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

//! Koopman operator approximations of Hamiltonian flows and the propagation
//! of full probability densities through the inverted flow map.
//!
//! The pipeline is:
//!
//! 1. build an orthonormal Legendre [`basis::BasisSet`] on a box,
//! 2. obtain a Koopman matrix either by Galerkin projection
//!    ([`koopman::galerkin_koopman`]) or from snapshot data
//!    ([`koopman::edmd_koopman`]),
//! 3. eigendecompose it into a [`koopman::KoopmanModel`] whose
//!    [`koopman::FlowMap`] evaluates `H V⁻¹ exp(ΔtΛ) V ℒ(x)` for any signed `Δt`,
//! 4. propagate a density by evaluating the prior through the inverse map
//!    ([`updf::propagate_pdf_inverse`]) and, when several legs are chained,
//!    shrink the composite log-density back to a low-order polynomial
//!    ([`reduce::reduce_logpdf`]).
//!
//! ```
//! use koopman_uq::basis::{BasisSet, BoxDomain, Quadrature};
//! use koopman_uq::dynamics::Duffing;
//! use koopman_uq::koopman::KoopmanModel;
//! use koopman_uq::updf::{Density, GaussianPdf, InverseMapDensity};
//!
//! # fn main() -> koopman_uq::Result<()> {
//! let basis = BasisSet::new(BoxDomain::cube(2, -1.5, 1.5)?, 5);
//! let quad = Quadrature::for_basis(&basis);
//! let model = KoopmanModel::galerkin(&Duffing::default(), basis, &quad)?;
//! let prior = GaussianPdf::isotropic(vec![0.4, 0.6], 0.1)?;
//! let p = InverseMapDensity::new(&model, &prior, 10.0)?;
//! assert!(p.density(&[0.1, -0.3]) >= 0.0);
//! # Ok(())
//! # }
//! ```
//!
//! [`validate`] holds the independent oracles (Monte Carlo, kernel density
//! estimates, comparison metrics) used to check all of the above.

pub mod basis;
pub mod dynamics;
pub mod error;
pub mod koopman;
pub mod linalg;
pub mod reduce;
pub mod updf;
pub mod validate;

pub use error::{Error, Result};

//! Dynamical systems, the reference integrator and EDMD snapshot generation.

mod integrator;
mod snapshots;

pub use integrator::{integrate, integrate_with, Dop853, IntegrationStats, Tolerance};
pub(crate) use snapshots::uniform_point;
pub use snapshots::{generate_snapshots, SnapshotMeta, SnapshotSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BoxDomain;
use crate::error::{Error, Result};

/// Right-hand side `ẋ = f(t, x)` of an ODE system.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]);

    /// Whether the field is claimed to be divergence free.
    fn is_hamiltonian(&self) -> bool {
        false
    }
}

/// A user-supplied right-hand side.
pub struct SystemModel<F> {
    dim: usize,
    rhs: F,
    hamiltonian: bool,
}

impl<F> SystemModel<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, hamiltonian: bool, rhs: F) -> Self {
        Self {
            dim,
            rhs,
            hamiltonian,
        }
    }
}

impl<F> Dynamics for SystemModel<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        (self.rhs)(t, x, dx)
    }

    fn is_hamiltonian(&self) -> bool {
        self.hamiltonian
    }
}

/// Undamped Duffing oscillator
/// `ẋ₁ = x₂/m`, `ẋ₂ = −κx₁ − κa²εx₁³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Duffing {
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "one")]
    pub stiffness: f64,
    #[serde(default = "one")]
    pub unit_scale: f64,
    pub epsilon: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Duffing {
    fn default() -> Self {
        Self {
            mass: 1.0,
            stiffness: 1.0,
            unit_scale: 1.0,
            epsilon: 0.01,
        }
    }
}

impl Duffing {
    pub fn new(mass: f64, stiffness: f64, unit_scale: f64, epsilon: f64) -> Result<Self> {
        let d = Self {
            mass,
            stiffness,
            unit_scale,
            epsilon,
        };
        d.validate()?;
        Ok(d)
    }

    /// The linear oscillator, `ε = 0`.
    pub fn harmonic() -> Self {
        Self {
            epsilon: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.stiffness > 0.0 && self.epsilon >= 0.0) {
            return Err(Error::invalid(format!(
                "duffing parameters need m > 0, κ > 0, ε ≥ 0 (got m={}, κ={}, ε={})",
                self.mass, self.stiffness, self.epsilon
            )));
        }
        if !self.unit_scale.is_finite() {
            return Err(Error::invalid("duffing unit scale must be finite"));
        }
        Ok(())
    }

    pub fn derivative(&self, x: [f64; 2]) -> [f64; 2] {
        let a2e = self.unit_scale * self.unit_scale * self.epsilon;
        [
            x[1] / self.mass,
            -self.stiffness * x[0] - self.stiffness * a2e * x[0].powi(3),
        ]
    }

    /// Conserved energy `x₂²/(2m) + κx₁²/2 + κa²εx₁⁴/4`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let a2e = self.unit_scale * self.unit_scale * self.epsilon;
        x[1] * x[1] / (2.0 * self.mass)
            + self.stiffness * x[0] * x[0] / 2.0
            + self.stiffness * a2e * x[0].powi(4) / 4.0
    }
}

impl Dynamics for Duffing {
    fn dim(&self) -> usize {
        2
    }

    #[inline]
    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        let d = self.derivative([x[0], x[1]]);
        dx[0] = d[0];
        dx[1] = d[1];
    }

    fn is_hamiltonian(&self) -> bool {
        true
    }
}

/// Central-difference trace of the Jacobian of `sys` at `x`.
pub fn jacobian_trace(sys: &dyn Dynamics, t: f64, x: &[f64], step: f64) -> f64 {
    let n = sys.dim();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut trace = 0.0;
    for j in 0..n {
        xp[j] = x[j] + step;
        sys.rhs(t, &xp, &mut fp);
        xp[j] = x[j] - step;
        sys.rhs(t, &xp, &mut fm);
        xp[j] = x[j];
        trace += (fp[j] - fm[j]) / (2.0 * step);
    }
    trace
}

/// Largest absolute finite-difference Jacobian trace over `points` uniform
/// samples of the box.
pub fn max_divergence(sys: &dyn Dynamics, domain: &BoxDomain, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..points)
        .map(|_| {
            let x: Vec<f64> = domain
                .lower()
                .iter()
                .zip(domain.upper())
                .map(|(lo, hi)| rng.gen_range(*lo..*hi))
                .collect();
            jacobian_trace(sys, 0.0, &x, 1e-5).abs()
        })
        .fold(0.0, f64::max)
}

/// Checks the divergence-free claim of a system flagged Hamiltonian.
pub fn check_hamiltonian(sys: &dyn Dynamics, domain: &BoxDomain) -> Result<()> {
    if !sys.is_hamiltonian() {
        return Ok(());
    }
    let div = max_divergence(sys, domain, 100, 0x5eed);
    if div > 1e-8 {
        return Err(Error::invalid(format!(
            "system flagged Hamiltonian but its Jacobian trace reaches {div:e}"
        )));
    }
    Ok(())
}

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::KoopmanModel;
use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::linalg;

/// Relative imaginary part above which a flow map is reported as leaky.
pub const LEAKAGE_TOL: f64 = 1e-8;

/// The polynomial map `x ↦ H V⁻¹ exp(ΔtΛ) V ℒ(x)` for one signed duration.
///
/// The complex product is formed once; evaluation is then a real
/// matrix-vector product and can be shared freely between threads.
#[derive(Debug, Clone)]
pub struct FlowMap {
    basis: BasisSet,
    dt: f64,
    transition: DMatrix<f64>,
    leakage: f64,
}

impl FlowMap {
    pub fn new(model: &KoopmanModel, observable: &DMatrix<f64>, dt: f64) -> Self {
        let spec = model.spectrum();
        let mut scaled = spec.left_inverse.clone();
        for (k, lam) in spec.values.iter().enumerate() {
            let mut col = scaled.column_mut(k);
            col *= (lam * dt).exp();
        }
        let lifted = scaled * &spec.left;
        let full = linalg::to_complex(observable) * lifted;
        let real = full.map(|z| z.re);
        let imag = full.map(|z| z.im);
        let leakage = imag.norm() / real.norm().max(f64::MIN_POSITIVE);
        if leakage > LEAKAGE_TOL {
            log::warn!("flow map over Δt = {dt} leaks a relative imaginary part of {leakage:e}");
        }
        Self {
            basis: model.basis().clone(),
            dt,
            transition: real,
            leakage,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Real `γ × η` matrix applied to `ℒ(x)`.
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    /// `‖Im T‖_F / ‖Re T‖_F` of the discarded imaginary part.
    pub fn leakage(&self) -> f64 {
        self.leakage
    }

    pub fn output_dim(&self) -> usize {
        self.transition.nrows()
    }

    /// Evaluates the map at `x`, using `lift` as scratch space of length η.
    /// Returns whether `x` lay outside the training box.
    pub fn apply_into(&self, x: &[f64], lift: &mut [f64], out: &mut [f64]) -> bool {
        let outside = self.basis.eval_into(x, lift);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self
                .transition
                .row(i)
                .iter()
                .zip(lift.iter())
                .map(|(a, b)| a * b)
                .sum();
        }
        outside
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut lift = vec![0.0; self.basis.size()];
        let mut out = vec![0.0; self.output_dim()];
        if self.apply_into(x, &mut lift, &mut out) {
            log::debug!("flow map evaluated outside the training box at {x:?}");
        }
        out
    }
}

fn check_state(model: &KoopmanModel, x: &[f64]) -> Result<()> {
    if x.len() != model.basis().dim() {
        return Err(Error::invalid(format!(
            "state has {} components, model expects {}",
            x.len(),
            model.basis().dim()
        )));
    }
    Ok(())
}

/// `H V⁻¹ exp(ΔtΛ) V ℒ(x0)`.
pub fn forward_flow(model: &KoopmanModel, x0: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_state(model, x0)?;
    Ok(model.flow_map(dt).apply(x0))
}

/// `H V⁻¹ exp(−ΔtΛ) V ℒ(xf)`, the state at `t0` that flows to `xf` over `dt`.
pub fn inverse_flow(model: &KoopmanModel, xf: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_state(model, xf)?;
    Ok(model.inverse_map(dt).apply(xf))
}

/// Lifted-coordinate propagator `V⁻¹ exp(ΔtΛ) V` (complex, η × η).
pub fn lifted_propagator(model: &KoopmanModel, dt: f64) -> DMatrix<Complex64> {
    let spec = model.spectrum();
    let diag = DVector::from_iterator(
        spec.values.len(),
        spec.values.iter().map(|l| (l * dt).exp()),
    );
    &spec.left_inverse * DMatrix::from_diagonal(&diag) * &spec.left
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BoxDomain, Quadrature};
    use crate::dynamics::{integrate, Duffing};
    use crate::koopman::Provenance;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn galerkin(sys: &Duffing, order: usize) -> KoopmanModel {
        let b = BasisSet::new(BoxDomain::cube(2, -1.5, 1.5).unwrap(), order);
        let q = Quadrature::for_basis(&b);
        KoopmanModel::galerkin(sys, b, &q).unwrap()
    }

    #[test]
    fn zero_duration_reconstructs_state() {
        let m = galerkin(&Duffing::default(), 5);
        let x = [0.4, 0.6];
        let y = forward_flow(&m, &x, 0.0).unwrap();
        assert_relative_eq!(y[0], x[0], epsilon = 1e-12);
        assert_relative_eq!(y[1], x[1], epsilon = 1e-12);
        let z = inverse_flow(&m, &x, 0.0).unwrap();
        assert_relative_eq!(z[1], x[1], epsilon = 1e-12);
    }

    #[test]
    fn harmonic_quarter_turn() {
        let m = galerkin(&Duffing::harmonic(), 1);
        let y = forward_flow(&m, &[1.0, 0.0], PI / 2.0).unwrap();
        assert!((y[0]).abs() < 1e-6 && (y[1] + 1.0).abs() < 1e-6, "{y:?}");
        for x in [[0.3, -0.2], [1.2, 0.9]] {
            let back = inverse_flow(&m, &forward_flow(&m, &x, 1.0).unwrap(), 1.0).unwrap();
            assert!((back[0] - x[0]).abs() < 1e-8 && (back[1] - x[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn duffing_round_trip() {
        let m = galerkin(&Duffing::default(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fwd = m.flow_map(1.0);
        let bwd = m.inverse_map(1.0);
        assert!(fwd.leakage() < LEAKAGE_TOL && bwd.leakage() < LEAKAGE_TOL);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let back = bwd.apply(&fwd.apply(&x));
            let err = ((back[0] - x[0]).powi(2) + (back[1] - x[1]).powi(2)).sqrt();
            assert!(err < 1e-4, "{x:?}: {err:e}");
        }
    }

    #[test]
    fn galerkin_flow_tracks_integrator_short_term() {
        let sys = Duffing::default();
        let m = galerkin(&sys, 9);
        let x0 = [0.4, 0.6];
        let y = forward_flow(&m, &x0, 1.0).unwrap();
        let r = integrate(&sys, &x0, 0.0, 1.0, 1e-12).unwrap();
        assert!((y[0] - r[0]).abs() < 1e-4 && (y[1] - r[1]).abs() < 1e-4);
    }

    #[test]
    fn semigroup_in_lifted_coordinates() {
        let m = galerkin(&Duffing::default(), 5);
        let a = lifted_propagator(&m, 0.7);
        let b = lifted_propagator(&m, 1.3);
        let ab = lifted_propagator(&m, 2.0);
        assert!((&b * &a - &ab).norm() < 1e-9 * ab.norm());
        let x = [0.2, -0.5];
        let l = linalg::to_complex(&DMatrix::from_column_slice(
            m.basis().size(),
            1,
            m.basis().eval(&x).values.as_slice(),
        ));
        let composed = linalg::to_complex(m.observable()) * (&b * &a) * l;
        let one = forward_flow(&m, &x, 2.0).unwrap();
        assert!((composed[(0, 0)].re - one[0]).abs() < 1e-10);
        assert!((composed[(1, 0)].re - one[1]).abs() < 1e-10);
    }

    #[test]
    fn structural_identity_with_discrete_matrix() {
        let m = galerkin(&Duffing::default(), 4);
        let dt = 0.1;
        let disc = (m.generator() * dt).exp();
        let rebuilt = KoopmanModel::from_discrete(
            m.basis().clone(),
            &disc,
            dt,
            m.observable().clone(),
            Provenance::Galerkin {
                quadrature_points: 0,
            },
        )
        .unwrap();
        let step = rebuilt.flow_map(dt);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let l = m.basis().eval(&x).values;
            let direct = m.observable() * (&disc * &l);
            let y = step.apply(&x);
            assert!((direct[0] - y[0]).abs() < 1e-8 && (direct[1] - y[1]).abs() < 1e-8);
        }
    }
}

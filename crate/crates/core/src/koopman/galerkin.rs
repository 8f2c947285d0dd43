use nalgebra::DMatrix;

use crate::basis::{BasisSet, Quadrature};
use crate::dynamics::Dynamics;
use crate::error::{Error, Result};

fn check_rule(basis: &BasisSet, quad: &Quadrature) -> Result<()> {
    if basis.domain() != quad.domain() {
        return Err(Error::invalid(
            "quadrature rule and basis live on different boxes",
        ));
    }
    Ok(())
}

/// Continuous-time Koopman matrix `K_ij = ⟨∇ℒ_i · f, ℒ_j⟩`.
pub fn galerkin_koopman(
    sys: &dyn Dynamics,
    basis: &BasisSet,
    quad: &Quadrature,
) -> Result<DMatrix<f64>> {
    check_rule(basis, quad)?;
    if sys.dim() != basis.dim() {
        return Err(Error::invalid("system and basis dimensions differ"));
    }
    let eta = basis.size();
    let q = quad.len();
    let mut lie = DMatrix::zeros(eta, q);
    let mut vals = DMatrix::zeros(eta, q);
    let mut f = vec![0.0; basis.dim()];
    for k in 0..q {
        let x = quad.node(k);
        sys.rhs(0.0, x, &mut f);
        let b = basis.eval_with_gradient(x);
        let grad = b.gradient.expect("gradient requested");
        let w = quad.weights()[k];
        for i in 0..eta {
            let d: f64 = (0..f.len()).map(|l| grad[(i, l)] * f[l]).sum();
            lie[(i, k)] = w * d;
        }
        vals.column_mut(k).copy_from(&b.values);
    }
    Ok(lie * vals.transpose())
}

/// Observable matrix `H_ij = ⟨g_i, ℒ_j⟩` for a `gamma`-valued observable.
pub fn observable_matrix_galerkin(
    g: impl Fn(&[f64], &mut [f64]),
    gamma: usize,
    basis: &BasisSet,
    quad: &Quadrature,
) -> Result<DMatrix<f64>> {
    check_rule(basis, quad)?;
    if gamma == 0 {
        return Err(Error::invalid(
            "observable must have at least one component",
        ));
    }
    let eta = basis.size();
    let mut gw = DMatrix::zeros(gamma, quad.len());
    let mut vals = DMatrix::zeros(eta, quad.len());
    let mut gx = vec![0.0; gamma];
    for k in 0..quad.len() {
        let x = quad.node(k);
        g(x, &mut gx);
        let w = quad.weights()[k];
        for (i, v) in gx.iter().enumerate() {
            gw[(i, k)] = w * v;
        }
        basis.eval_into(x, vals.column_mut(k).as_mut_slice());
    }
    Ok(gw * vals.transpose())
}

/// `H` for the identity observable, so that `H ℒ(x) = x`.
pub fn identity_observable_galerkin(basis: &BasisSet, quad: &Quadrature) -> Result<DMatrix<f64>> {
    if basis.order() == 0 {
        return Err(Error::invalid(
            "the identity observable needs a basis of order at least 1",
        ));
    }
    observable_matrix_galerkin(|x, out| out.copy_from_slice(x), basis.dim(), basis, quad)
}

//! Gradient of the objective with respect to the plastic field through the
//! static equilibrium constraint, by one adjoint solve per evaluation.

use nalgebra::DVector;

use crate::elasticity::{stiffness_matrix, ElementPrecomp, MaterialParams};
use crate::equilibrium::{factor_with_shift, solve_static, EquilibriumSolution, ExternalLoad, SolverConfig};
use crate::error::{Error, Result};
use crate::mesh::TetMesh;
use crate::objective::{Objective, ObjectiveValue};
use crate::plastic::{dforce_dfp, PlasticField};
use crate::sparse::CsrMatrix;

/// Largest parameter count the finite-difference oracle accepts.
pub const FD_MAX_PARAMS: usize = 600;

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub value: ObjectiveValue,
    /// `dJ/dF_p`, 6 coefficients per element.
    pub gradient: DVector<f64>,
    /// Negative pivots met in the adjoint factorization (0 at a stable equilibrium).
    pub negative_pivots: usize,
}

/// Exact `K_ff = ∂f_net/∂x` on free dofs at `x`, including attachment springs.
pub fn free_stiffness(
    x: &DVector<f64>,
    field: &PlasticField,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
    load: &ExternalLoad,
) -> Result<(CsrMatrix, Vec<usize>)> {
    let free = load.free_dofs(pre.num_vertices);
    let k = stiffness_matrix(x, field, pre, mat, false)?.add_diagonal(&load.attachment_stiffness(pre.ndof()));
    Ok((k.submatrix(&free, &free), free))
}

/// Solves `K_ff λ = rhs_f` and scatters `λ` into a full-length vector that
/// is zero on fixed dofs.
pub fn adjoint_solve(
    x: &DVector<f64>,
    field: &PlasticField,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
    load: &ExternalLoad,
    rhs: &DVector<f64>,
) -> Result<(DVector<f64>, usize)> {
    let (k_ff, free) = free_stiffness(x, field, pre, mat, load)?;
    let shift = if load.is_anchored() { 0.0 } else { 1e-8 };
    let (fac, used) = factor_with_shift(&k_ff, shift)?;
    if used > shift {
        log::warn!("adjoint system needed a diagonal shift of {used:e}");
    }
    let neg = fac.negative_pivots();
    if neg > 0 {
        log::warn!("adjoint stiffness has {neg} negative pivots; equilibrium may be unstable");
    }
    let rhs_f = DVector::from_iterator(free.len(), free.iter().map(|&i| rhs[i]));
    let lam_f = fac.solve(&rhs_f);
    let mut lam = DVector::zeros(x.len());
    for (k, &i) in free.iter().enumerate() {
        lam[i] = lam_f[k];
    }
    Ok((lam, neg))
}

/// Objective value and gradient at the equilibrium `sol` of `field`.
pub fn objective_gradient(
    obj: &Objective,
    mesh: &TetMesh,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
    load: &ExternalLoad,
    field: &PlasticField,
    sol: &EquilibriumSolution,
) -> Result<GradientResult> {
    if !sol.converged {
        return Err(Error::NotConverged { residual: sol.residual_inf, tol: sol.tol_force });
    }
    let x = &sol.x_static;
    let value = obj.evaluate(mesh, x, field, pre, mat)?;
    let (lam, negative_pivots) = adjoint_solve(x, field, pre, mat, load, &value.dloss_dx)?;
    let dfdp = dforce_dfp(x, field, pre, mat, &load.gravity)?;
    let gradient = &value.explicit_dfp - dfdp.tr_mul_vec(&lam);
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(GradientResult { value, gradient, negative_pivots })
}

/// Central finite differences of the objective, re-solving equilibrium for
/// every perturbed field from the warm start `x_warm`. Only for small meshes.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient(
    obj: &Objective,
    mesh: &TetMesh,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
    load: &ExternalLoad,
    field: &PlasticField,
    x_warm: &DVector<f64>,
    cfg: &SolverConfig,
    h: f64,
) -> Result<DVector<f64>> {
    let p = field.to_vector();
    if p.len() > FD_MAX_PARAMS {
        return Err(Error::Invalid(format!(
            "finite-difference oracle limited to {FD_MAX_PARAMS} parameters, got {}",
            p.len()
        )));
    }
    let eval = |q: &DVector<f64>| -> Result<f64> {
        let f = PlasticField::from_vector(q)?;
        let sol = solve_static(pre, &f, mat, load, x_warm, cfg)?;
        if !sol.converged {
            return Err(Error::NotConverged { residual: sol.residual_inf, tol: sol.tol_force });
        }
        Ok(obj.evaluate(mesh, &sol.x_static, &f, pre, mat)?.total)
    };
    let mut g = DVector::zeros(p.len());
    for i in 0..p.len() {
        let step = h * p[i].abs().max(1.0);
        let mut qp = p.clone();
        qp[i] += step;
        let mut qm = p.clone();
        qm[i] -= step;
        g[i] = (eval(&qp)? - eval(&qm)?) / (2.0 * step);
    }
    Ok(g)
}

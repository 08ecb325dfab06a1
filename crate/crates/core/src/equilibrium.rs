//! Quasi-static equilibrium: find `x` with `f_int(x) = f_ext(x)`.
//!
//! Newton's method on the total potential (elastic + gravity + attachment
//! springs) with Armijo backtracking. The exact Hessian is used when it is
//! positive definite, a PSD-projected one otherwise. Dirichlet
//! vertices are eliminated from the system; their positions are set exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::elasticity::{elastic_energy, internal_forces, mass_matrix, stiffness_matrix, ElementPrecomp, MaterialParams};
use crate::error::{Error, Result};
use crate::mesh::{set_vertex, vertex};
use crate::plastic::PlasticField;
use crate::sparse::{CsrMatrix, SkylineLdlt};

pub const STANDARD_GRAVITY: f64 = 9.8;

/// Zero-length spring pulling a vertex towards a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attachment {
    pub vertex: usize,
    /// N/m
    pub stiffness: f64,
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalLoad {
    /// m/s²
    pub gravity: Vector3<f64>,
    /// Dirichlet vertices and their prescribed positions.
    pub fixed: Vec<(usize, Vector3<f64>)>,
    pub attachments: Vec<Attachment>,
}

impl Default for ExternalLoad {
    fn default() -> Self {
        Self {
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
            fixed: Vec::new(),
            attachments: Vec::new(),
        }
    }
}

impl ExternalLoad {
    pub fn zero_gravity() -> Self {
        Self {
            gravity: Vector3::zeros(),
            ..Default::default()
        }
    }

    /// Fixes the given vertices at their positions in `x`.
    pub fn fix_at(mut self, vertices: &[usize], x: &DVector<f64>) -> Self {
        self.fixed.extend(vertices.iter().map(|&v| (v, vertex(x, v))));
        self
    }

    pub fn validate(&self, num_vertices: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(v, p) in &self.fixed {
            if v >= num_vertices {
                return Err(Error::Invalid(format!("fixed vertex {v} out of range")));
            }
            if !seen.insert(v) {
                return Err(Error::Invalid(format!("fixed vertex {v} listed twice")));
            }
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Invalid(format!("fixed vertex {v} has a non-finite target")));
            }
        }
        for a in &self.attachments {
            if a.vertex >= num_vertices {
                return Err(Error::Invalid(format!("attachment vertex {} out of range", a.vertex)));
            }
            if !(a.stiffness >= 0.0) {
                return Err(Error::Invalid(format!("attachment stiffness must be ≥ 0, got {}", a.stiffness)));
            }
        }
        if !self.gravity.iter().all(|c| c.is_finite()) {
            return Err(Error::Invalid("gravity must be finite".into()));
        }
        Ok(())
    }

    /// True if anything holds the body in place.
    pub fn is_anchored(&self) -> bool {
        !self.fixed.is_empty() || self.attachments.iter().any(|a| a.stiffness > 0.0)
    }

    /// Indices of the unconstrained degrees of freedom, ascending.
    pub fn free_dofs(&self, num_vertices: usize) -> Vec<usize> {
        let fixed: BTreeSet<usize> = self.fixed.iter().map(|&(v, _)| v).collect();
        (0..num_vertices)
            .filter(|v| !fixed.contains(v))
            .flat_map(|v| [3 * v, 3 * v + 1, 3 * v + 2])
            .collect()
    }

    /// Diagonal of `−∂f_ext/∂x` (attachment springs).
    pub fn attachment_stiffness(&self, ndof: usize) -> DVector<f64> {
        let mut d = DVector::zeros(ndof);
        for a in &self.attachments {
            for k in 0..3 {
                d[3 * a.vertex + k] += a.stiffness;
            }
        }
        d
    }
}

/// Gravity `M g` plus spring forces `−k (x − target)`.
pub fn external_forces(x: &DVector<f64>, load: &ExternalLoad, mass: &DVector<f64>) -> DVector<f64> {
    let mut f = DVector::zeros(x.len());
    for i in 0..x.len() / 3 {
        for d in 0..3 {
            f[3 * i + d] = mass[3 * i + d] * load.gravity[d];
        }
    }
    for a in &load.attachments {
        for d in 0..3 {
            f[3 * a.vertex + d] -= a.stiffness * (x[3 * a.vertex + d] - a.target[d]);
        }
    }
    f
}

/// Elastic energy + gravitational potential + spring energy. Its gradient is
/// `f_int − f_ext`.
pub fn total_potential(
    x: &DVector<f64>,
    field: &PlasticField,
    load: &ExternalLoad,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
) -> Result<f64> {
    let mass = mass_matrix(field, pre, mat)?;
    Ok(elastic_energy(x, field, pre, mat)? + external_potential(x, load, &mass))
}

fn external_potential(x: &DVector<f64>, load: &ExternalLoad, mass: &DVector<f64>) -> f64 {
    let mut e = 0.0;
    for i in 0..x.len() / 3 {
        for d in 0..3 {
            e -= mass[3 * i + d] * load.gravity[d] * x[3 * i + d];
        }
    }
    for a in &load.attachments {
        let dx = vertex(x, a.vertex) - Vector3::from(a.target);
        e += 0.5 * a.stiffness * dx.norm_squared();
    }
    e
}

/// `f_int − f_ext`.
pub fn net_force(
    x: &DVector<f64>,
    field: &PlasticField,
    load: &ExternalLoad,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
) -> Result<DVector<f64>> {
    let mass = mass_matrix(field, pre, mat)?;
    Ok(internal_forces(x, field, pre, mat)? - external_forces(x, load, &mass))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Residual tolerance (N) on free dofs. `None` = `1e-6 μ V^{2/3}`.
    pub tol_force: Option<f64>,
    pub max_iters: usize,
    pub ls_shrink: f64,
    pub ls_c1: f64,
    /// Initial diagonal shift, relative to the mean stiffness diagonal.
    pub tikhonov0: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_force: None,
            max_iters: 200,
            ls_shrink: 0.5,
            ls_c1: 1e-4,
            tikhonov0: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn resolved_tol(&self, mat: &MaterialParams, pre: &ElementPrecomp) -> f64 {
        self.tol_force
            .unwrap_or_else(|| 1e-6 * mat.mu() * pre.total_volume().powf(2.0 / 3.0))
    }
}

/// Shift used for unanchored bodies, whose stiffness has rigid null modes.
const FREE_BODY_SHIFT: f64 = 1e-8;
const MAX_SHIFT: f64 = 1e6;
const MIN_STEP: f64 = 1.0 / (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    /// line-search halvings taken
    pub backtracks: usize,
    pub residual_inf: f64,
    pub energy: f64,
    pub step_len: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub x_static: DVector<f64>,
    /// Max-norm of `f_net` over free dofs.
    pub residual_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    pub energy: f64,
    pub tol_force: f64,
    pub log: Vec<IterationLog>,
}

impl EquilibriumSolution {
    /// `iter,k,residual_inf,energy,step_len`
    pub fn log_csv(&self) -> String {
        let mut s = String::from("iter,k,residual_inf,energy,step_len\n");
        for l in &self.log {
            let _ = writeln!(s, "{},{},{:.16e},{:.16e},{:.16e}", l.iter, l.backtracks, l.residual_inf, l.energy, l.step_len);
        }
        s
    }
}

fn restrict(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn residual_inf(g: &DVector<f64>, free: &[usize]) -> f64 {
    free.iter().fold(0.0, |m, &i| m.max(g[i].abs()))
}

/// Factors `k + shift·mean(diag)·I`, escalating the shift by 10× on failure.
/// Returns the factorization and the relative shift used.
pub(crate) fn factor_with_shift(k: &CsrMatrix, shift0: f64) -> Result<(SkylineLdlt, f64)> {
    let diag = k.diagonal();
    let mean = (diag.iter().map(|d| d.abs()).sum::<f64>() / diag.len().max(1) as f64).max(f64::MIN_POSITIVE);
    let mut shift = shift0;
    loop {
        let shifted;
        let m = if shift > 0.0 {
            shifted = k.add_diagonal(&DVector::from_element(k.nrows(), shift * mean));
            &shifted
        } else {
            k
        };
        match SkylineLdlt::factor(m) {
            Ok(f) => return Ok((f, shift)),
            Err(e) => {
                shift = if shift > 0.0 { shift * 10.0 } else { FREE_BODY_SHIFT };
                if shift > MAX_SHIFT {
                    return Err(e);
                }
                log::debug!("factorization failed, raising shift to {shift:e}");
            }
        }
    }
}

/// Newton solve of `f_int(x) = f_ext(x)` starting from `x0`.
pub fn solve_static(
    pre: &ElementPrecomp,
    field: &PlasticField,
    mat: &MaterialParams,
    load: &ExternalLoad,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<EquilibriumSolution> {
    load.validate(pre.num_vertices)?;
    if x0.len() != pre.ndof() {
        return Err(Error::DimensionMismatch { expected: pre.ndof(), got: x0.len() });
    }
    if !load.is_anchored() && load.gravity.norm() > 0.0 {
        return Err(Error::NoSupport);
    }
    if cfg.max_iters == 0 {
        return Err(Error::Invalid("max_iters must be ≥ 1".into()));
    }
    let tol = cfg.resolved_tol(mat, pre);
    let free = load.free_dofs(pre.num_vertices);
    let mass = mass_matrix(field, pre, mat)?;
    let spring_diag = load.attachment_stiffness(pre.ndof());
    let base_shift = if load.is_anchored() { cfg.tikhonov0 } else { cfg.tikhonov0.max(FREE_BODY_SHIFT) };

    let mut x = x0.clone();
    for &(v, p) in &load.fixed {
        set_vertex(&mut x, v, &p);
    }
    let potential = |x: &DVector<f64>| -> Result<f64> { Ok(elastic_energy(x, field, pre, mat)? + external_potential(x, load, &mass)) };
    let gradient = |x: &DVector<f64>| -> Result<DVector<f64>> { Ok(internal_forces(x, field, pre, mat)? - external_forces(x, load, &mass)) };

    let mut energy = potential(&x)?;
    let mut g = gradient(&x)?;
    let mut res = residual_inf(&g, &free);
    let mut log = Vec::new();
    let mut iter = 0;
    while res > tol && iter < cfg.max_iters {
        let g_f = restrict(&g, &free);
        // the exact Hessian converges quadratically; fall back to the
        // projected one when it is not positive definite
        let exact = if base_shift == 0.0 {
            let k = stiffness_matrix(&x, field, pre, mat, false)?.add_diagonal(&spring_diag);
            SkylineLdlt::factor(&k.submatrix(&free, &free))
                .ok()
                .filter(|f| f.negative_pivots() == 0)
                .map(|f| -f.solve(&g_f))
                .filter(|d| d.iter().all(|v| v.is_finite()) && g_f.dot(d) < 0.0)
        } else {
            None
        };

        let mut shift = base_shift;
        let (dir, slope) = if let Some(d) = exact {
            let slope = g_f.dot(&d);
            (d, slope)
        } else {
            let k = stiffness_matrix(&x, field, pre, mat, true)?.add_diagonal(&spring_diag);
            let k_ff = k.submatrix(&free, &free);
            loop {
                let (fac, used) = factor_with_shift(&k_ff, shift)?;
                let d = -fac.solve(&g_f);
                let slope = g_f.dot(&d);
                if slope < 0.0 && d.iter().all(|v| v.is_finite()) {
                    break (d, slope);
                }
                shift = if used > 0.0 { used * 10.0 } else { FREE_BODY_SHIFT };
                if shift > MAX_SHIFT {
                    return Err(Error::LinearSolveFailure("no descent direction".into()));
                }
            }
        };

        let mut alpha = 1.0;
        let mut backtracks = 0;
        let (x_new, e_new, g_new, res_new) = loop {
            let mut trial = x.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] += alpha * dir[k];
            }
            let e_trial = potential(&trial)?;
            let armijo = e_trial <= energy + cfg.ls_c1 * alpha * slope;
            // below roundoff in the energy, accept on residual decrease
            let flat = (e_trial - energy).abs() <= 1e-13 * energy.abs().max(f64::MIN_POSITIVE);
            if armijo || flat {
                let g_trial = gradient(&trial)?;
                let r_trial = residual_inf(&g_trial, &free);
                if armijo || r_trial < res {
                    break (trial, e_trial, g_trial, r_trial);
                }
            }
            alpha *= cfg.ls_shrink;
            backtracks += 1;
            if alpha < MIN_STEP {
                return Err(Error::SolverDiverged(format!(
                    "line search failed at iteration {iter} (residual {res:e})"
                )));
            }
        };
        iter += 1;
        let step_len = alpha * dir.amax();
        x = x_new;
        energy = e_new;
        g = g_new;
        res = res_new;
        log.push(IterationLog {
            iter,
            backtracks,
            residual_inf: res,
            energy,
            step_len,
        });
    }

    Ok(EquilibriumSolution {
        x_static: x,
        residual_inf: res,
        iterations: iter,
        converged: res <= tol,
        energy,
        tol_force: tol,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{box_mesh, TetMesh};

    fn mat() -> MaterialParams {
        MaterialParams::default()
    }

    #[test]
    fn external_force_arithmetic() {
        let x = DVector::from_vec(vec![0.1, 0.0, 0.0]);
        let mass = DVector::from_element(3, 2.0);
        let none = ExternalLoad::zero_gravity();
        assert_eq!(external_forces(&x, &none, &mass), DVector::zeros(3));
        let grav = ExternalLoad::default();
        let f = external_forces(&x, &grav, &mass);
        assert!((f - DVector::from_vec(vec![0.0, 0.0, -19.6])).amax() < 1e-12);
        let spring = ExternalLoad {
            attachments: vec![Attachment { vertex: 0, stiffness: 100.0, target: [0.0; 3] }],
            ..ExternalLoad::zero_gravity()
        };
        let f = external_forces(&x, &spring, &mass);
        assert!((f - DVector::from_vec(vec![-10.0, 0.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn potential_gradient_matches_finite_differences() {
        let mesh = box_mesh([1, 1, 1], Vector3::repeat(0.1), Vector3::zeros());
        let pre = ElementPrecomp::new(&mesh).unwrap();
        let field = PlasticField::from_coeffs(vec![[1.1, 0.05, 0.0, 0.95, 0.02, 1.05]; 5]);
        let mut x = mesh.flat_positions();
        for i in 0..x.len() {
            x[i] += 0.004 * (((i * 37) % 11) as f64 / 11.0 - 0.5);
        }
        let load = ExternalLoad {
            attachments: vec![Attachment { vertex: 2, stiffness: 300.0, target: [0.0, 0.12, 0.01] }],
            ..ExternalLoad::default()
        };
        let g = net_force(&x, &field, &load, &pre, &mat()).unwrap();
        let h = 1e-7;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (total_potential(&xp, &field, &load, &pre, &mat()).unwrap()
                - total_potential(&xm, &field, &load, &pre, &mat()).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g.amax(), "dof {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn raising_a_body_costs_mgh() {
        let mesh = box_mesh([1, 1, 1], Vector3::repeat(0.1), Vector3::zeros());
        let pre = ElementPrecomp::new(&mesh).unwrap();
        let field = PlasticField::identity(5);
        let load = ExternalLoad::default();
        let x = mesh.flat_positions();
        let mut up = x.clone();
        for i in 0..mesh.num_vertices() {
            up[3 * i + 2] += 0.3;
        }
        let de = total_potential(&up, &field, &load, &pre, &mat()).unwrap() - total_potential(&x, &field, &load, &pre, &mat()).unwrap();
        let m = 1000.0 * 1e-3;
        assert!((de - m * 9.8 * 0.3).abs() < 1e-9);
    }

    #[test]
    fn free_body_under_gravity_is_rejected() {
        let mesh = box_mesh([1, 1, 1], Vector3::repeat(0.1), Vector3::zeros());
        let pre = ElementPrecomp::new(&mesh).unwrap();
        let r = solve_static(&pre, &PlasticField::identity(5), &mat(), &ExternalLoad::default(), &mesh.flat_positions(), &SolverConfig::default());
        assert!(matches!(r, Err(Error::NoSupport)));
    }

    #[test]
    fn rest_state_converges_immediately() {
        let mesh = box_mesh([2, 1, 1], Vector3::repeat(0.1), Vector3::zeros());
        let pre = ElementPrecomp::new(&mesh).unwrap();
        let x = mesh.flat_positions();
        let sol = solve_static(&pre, &PlasticField::identity(10), &mat(), &ExternalLoad::zero_gravity(), &x, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.x_static, x);
    }

    #[test]
    fn hanging_tet_sags() {
        // top face fixed, apex below
        let mesh = TetMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.1),
                Vector3::new(0.1, 0.0, 0.1),
                Vector3::new(0.0, 0.1, 0.1),
                Vector3::new(0.02, 0.02, 0.0),
            ],
            vec![[0, 1, 2, 3]],
        )
        .unwrap()
        .validate_and_orient(1e-12)
        .unwrap();
        let pre = ElementPrecomp::new(&mesh).unwrap();
        let x = mesh.flat_positions();
        let load = ExternalLoad::default().fix_at(&[0, 1, 2], &x);
        let sol = solve_static(&pre, &PlasticField::identity(1), &mat(), &load, &x, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.residual_inf <= sol.tol_force);
        assert!(sol.x_static[11] < x[11]);
        for i in 0..9 {
            assert_eq!(sol.x_static[i], x[i]);
        }
        // energy never increases across accepted steps
        let mut prev = f64::INFINITY;
        for l in &sol.log {
            assert!(l.energy <= prev + 1e-12 * prev.abs().min(1e300));
            prev = l.energy;
        }
    }
}

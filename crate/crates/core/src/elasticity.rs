//! Element kinematics, the stable Neo-Hookean constitutive model, and global
//! assembly of elastic energy, internal forces, stiffness and lumped mass.
//!
//! Every element carries a plastic strain `A` (see [`crate::plastic`]). The
//! elastic deformation gradient is `Fe = F A⁻¹`, the element rest volume is
//! `V_init det A`, and the elastic energy is `V_init det A Ψ(Fe)`. Internal
//! forces are the energy gradient `∂E/∂x`.
//!
//! Assembly is sequential in element order, so repeated runs are bit-identical.

use std::fmt::Write as _;

use nalgebra::{DVector, Matrix3, SMatrix, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{vertex, TetMesh};
use crate::plastic::PlasticField;
use crate::sparse::{CsrMatrix, TripletBuilder};

pub type Matrix12 = SMatrix<f64, 12, 12>;

/// Young's modulus (Pa), Poisson's ratio and density (kg/m³).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    pub young_pa: f64,
    pub poisson: f64,
    pub density: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            young_pa: 5e4,
            poisson: 0.45,
            density: 1000.0,
        }
    }
}

impl MaterialParams {
    pub fn new(young_pa: f64, poisson: f64, density: f64) -> Result<Self> {
        let m = Self { young_pa, poisson, density };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.young_pa > 0.0) {
            return Err(Error::Invalid(format!("Young's modulus must be positive, got {}", self.young_pa)));
        }
        if !(0.0..0.5).contains(&self.poisson) {
            return Err(Error::Invalid(format!("Poisson's ratio must be in [0, 0.5), got {}", self.poisson)));
        }
        if !(self.density > 0.0) {
            return Err(Error::Invalid(format!("density must be positive, got {}", self.density)));
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.young_pa / (2.0 * (1.0 + self.poisson))
    }

    pub fn lambda(&self) -> f64 {
        self.young_pa * self.poisson / ((1.0 + self.poisson) * (1.0 - 2.0 * self.poisson))
    }

    /// Weight of the volumetric term. Falls back to `mu` when `lambda`
    /// vanishes so the rest state stays stress-free.
    fn volumetric_weight(&self) -> f64 {
        let l = self.lambda();
        if l > 0.0 {
            l
        } else {
            self.mu()
        }
    }

    /// `α = 1 + μ/λ`, the volumetric rest target that makes `P(I) = 0`.
    pub fn alpha(&self) -> f64 {
        1.0 + self.mu() / self.volumetric_weight()
    }

    /// Same material with both moduli scaled by `s`.
    pub fn scaled_stiffness(&self, s: f64) -> Self {
        Self { young_pa: self.young_pa * s, ..*self }
    }
}

/// Per-element `Dm⁻¹` and initial volume, plus the connectivity they belong to.
#[derive(Debug, Clone)]
pub struct ElementPrecomp {
    pub dm_inv: Vec<Matrix3<f64>>,
    pub volume_init: Vec<f64>,
    pub elements: Vec<[usize; 4]>,
    pub num_vertices: usize,
}

impl ElementPrecomp {
    /// Requires positively oriented, non-degenerate elements.
    pub fn new(mesh: &TetMesh) -> Result<Self> {
        let mut dm_inv = Vec::with_capacity(mesh.num_elements());
        let mut volume_init = Vec::with_capacity(mesh.num_elements());
        let p = mesh.positions();
        for (t, e) in mesh.elements().iter().enumerate() {
            let dm = edge_matrix(&[p[e[0]], p[e[1]], p[e[2]], p[e[3]]]);
            let vol = dm.determinant() / 6.0;
            if !(vol > 0.0) {
                return Err(Error::DegenerateElement(t));
            }
            dm_inv.push(dm.try_inverse().ok_or(Error::DegenerateElement(t))?);
            volume_init.push(vol);
        }
        Ok(Self {
            dm_inv,
            volume_init,
            elements: mesh.elements().to_vec(),
            num_vertices: mesh.num_vertices(),
        })
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn ndof(&self) -> usize {
        3 * self.num_vertices
    }

    pub fn total_volume(&self) -> f64 {
        self.volume_init.iter().sum()
    }

    pub fn element_positions(&self, x: &DVector<f64>, t: usize) -> [Vector3<f64>; 4] {
        self.elements[t].map(|i| vertex(x, i))
    }
}

fn edge_matrix(xs: &[Vector3<f64>; 4]) -> Matrix3<f64> {
    Matrix3::from_columns(&[xs[1] - xs[0], xs[2] - xs[0], xs[3] - xs[0]])
}

/// `F = Ds Dm⁻¹`.
pub fn deformation_gradient(xs: &[Vector3<f64>; 4], dm_inv: &Matrix3<f64>) -> Matrix3<f64> {
    edge_matrix(xs) * dm_inv
}

/// `∂ det F / ∂F`, column-wise cross products.
pub fn cofactor(f: &Matrix3<f64>) -> Matrix3<f64> {
    let (c0, c1, c2) = (f.column(0), f.column(1), f.column(2));
    Matrix3::from_columns(&[c1.cross(&c2), c2.cross(&c0), c0.cross(&c1)])
}

/// Directional derivative of [`cofactor`] along `df`.
fn cofactor_differential(f: &Matrix3<f64>, df: &Matrix3<f64>) -> Matrix3<f64> {
    let (f0, f1, f2) = (f.column(0), f.column(1), f.column(2));
    let (d0, d1, d2) = (df.column(0), df.column(1), df.column(2));
    Matrix3::from_columns(&[
        d1.cross(&f2) + f1.cross(&d2),
        d2.cross(&f0) + f2.cross(&d0),
        d0.cross(&f1) + f0.cross(&d1),
    ])
}

/// `Ψ(F) = μ/2 (tr FᵀF − 3) + λ/2 (det F − α)²`. Finite for inverted `F`.
pub fn energy_density(f: &Matrix3<f64>, mat: &MaterialParams) -> f64 {
    let mu = mat.mu();
    let lam = mat.volumetric_weight();
    let j = f.determinant();
    0.5 * mu * (f.norm_squared() - 3.0) + 0.5 * lam * (j - mat.alpha()).powi(2)
}

/// First Piola-Kirchhoff stress `∂Ψ/∂F`.
pub fn pk1_stress(f: &Matrix3<f64>, mat: &MaterialParams) -> Matrix3<f64> {
    let lam = mat.volumetric_weight();
    mat.mu() * f + lam * (f.determinant() - mat.alpha()) * cofactor(f)
}

/// `dP = ∂²Ψ/∂F² : dF`.
pub fn pk1_differential(f: &Matrix3<f64>, df: &Matrix3<f64>, mat: &MaterialParams) -> Matrix3<f64> {
    let lam = mat.volumetric_weight();
    let cof = cofactor(f);
    mat.mu() * df + lam * cof.dot(df) * cof + lam * (f.determinant() - mat.alpha()) * cofactor_differential(f, df)
}

/// Per-element quantities shared by forces, stiffness and the plastic Jacobian.
pub(crate) struct ElementState {
    pub f: Matrix3<f64>,
    pub fe: Matrix3<f64>,
    pub a_inv: Matrix3<f64>,
    /// plastic volume `V_init det A`
    pub vp: f64,
}

pub(crate) fn element_state(
    x: &DVector<f64>,
    field: &PlasticField,
    pre: &ElementPrecomp,
    t: usize,
) -> Result<ElementState> {
    let a = field.matrix(t);
    let det_a = a.determinant();
    if !(det_a > 0.0) {
        return Err(Error::SingularPlastic(t));
    }
    let a_inv = a.try_inverse().ok_or(Error::SingularPlastic(t))?;
    let f = deformation_gradient(&pre.element_positions(x, t), &pre.dm_inv[t]);
    Ok(ElementState {
        f,
        fe: f * a_inv,
        a_inv,
        vp: pre.volume_init[t] * det_a,
    })
}

/// Spreads `H = G Dm⁻ᵀ` (forces on vertices 1..3) to all four vertices.
pub(crate) fn scatter_columns(h: &Matrix3<f64>) -> [Vector3<f64>; 4] {
    let (h1, h2, h3) = (h.column(0).into_owned(), h.column(1).into_owned(), h.column(2).into_owned());
    [-(h1 + h2 + h3), h1, h2, h3]
}

/// `dDs` for a unit perturbation of local dof `k = 3 * vertex + axis`.
pub(crate) fn edge_matrix_unit(k: usize) -> Matrix3<f64> {
    let (a, d) = (k / 3, k % 3);
    let mut m = Matrix3::zeros();
    if a == 0 {
        for c in 0..3 {
            m[(d, c)] = -1.0;
        }
    } else {
        m[(d, a - 1)] = 1.0;
    }
    m
}

fn check_dims(x: &DVector<f64>, field: &PlasticField, pre: &ElementPrecomp) -> Result<()> {
    if x.len() != pre.ndof() {
        return Err(Error::DimensionMismatch { expected: pre.ndof(), got: x.len() });
    }
    if field.len() != pre.num_elements() {
        return Err(Error::DimensionMismatch { expected: pre.num_elements(), got: field.len() });
    }
    Ok(())
}

pub fn elastic_energy(x: &DVector<f64>, field: &PlasticField, pre: &ElementPrecomp, mat: &MaterialParams) -> Result<f64> {
    check_dims(x, field, pre)?;
    let mut e = 0.0;
    for t in 0..pre.num_elements() {
        let s = element_state(x, field, pre, t)?;
        e += s.vp * energy_density(&s.fe, mat);
    }
    Ok(e)
}

/// Element nodal forces `∂E_t/∂x` for the four vertices.
pub(crate) fn element_forces(s: &ElementState, dm_inv: &Matrix3<f64>, mat: &MaterialParams) -> [Vector3<f64>; 4] {
    let g = s.vp * pk1_stress(&s.fe, mat) * s.a_inv.transpose();
    scatter_columns(&(g * dm_inv.transpose()))
}

/// `f_int = ∂E/∂x`.
pub fn internal_forces(
    x: &DVector<f64>,
    field: &PlasticField,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
) -> Result<DVector<f64>> {
    check_dims(x, field, pre)?;
    let mut out = DVector::zeros(pre.ndof());
    for t in 0..pre.num_elements() {
        let s = element_state(x, field, pre, t)?;
        let f = element_forces(&s, &pre.dm_inv[t], mat);
        for (local, &v) in pre.elements[t].iter().enumerate() {
            for d in 0..3 {
                out[3 * v + d] += f[local][d];
            }
        }
    }
    Ok(out)
}

/// Exact 12×12 Hessian of one element's energy, dof order `3 * local + axis`.
pub(crate) fn element_hessian(s: &ElementState, dm_inv: &Matrix3<f64>, mat: &MaterialParams) -> Matrix12 {
    let mut k = Matrix12::zeros();
    let a_inv_t = s.a_inv.transpose();
    let dm_inv_t = dm_inv.transpose();
    for col in 0..12 {
        let dfe = edge_matrix_unit(col) * dm_inv * s.a_inv;
        let dg = s.vp * pk1_differential(&s.fe, &dfe, mat) * a_inv_t;
        let cols = scatter_columns(&(dg * dm_inv_t));
        for (a, v) in cols.iter().enumerate() {
            for d in 0..3 {
                k[(3 * a + d, col)] = v[d];
            }
        }
    }
    k
}

/// Clamps negative eigenvalues of a symmetric block to zero.
pub fn project_psd(k: &Matrix12) -> Matrix12 {
    let sym = (k + k.transpose()) * 0.5;
    // blocks that are already PSD up to roundoff skip the eigensolve
    let guard = 1e-10 * sym.trace().abs().max(f64::MIN_POSITIVE);
    if (sym + Matrix12::identity() * guard).cholesky().is_some() {
        return sym;
    }
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    eig.eigenvectors * SMatrix::<f64, 12, 12>::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// `∂f_int/∂x`, assembled from per-element blocks (optionally PSD-projected).
pub fn stiffness_matrix(
    x: &DVector<f64>,
    field: &PlasticField,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
    psd_project: bool,
) -> Result<CsrMatrix> {
    check_dims(x, field, pre)?;
    let n = pre.ndof();
    let mut trip = TripletBuilder::with_capacity(n, n, 144 * pre.num_elements());
    for t in 0..pre.num_elements() {
        let s = element_state(x, field, pre, t)?;
        let mut ke = element_hessian(&s, &pre.dm_inv[t], mat);
        if psd_project {
            ke = project_psd(&ke);
        }
        let e = pre.elements[t];
        for a in 0..4 {
            for b in 0..4 {
                for i in 0..3 {
                    for j in 0..3 {
                        trip.push(3 * e[a] + i, 3 * e[b] + j, ke[(3 * a + i, 3 * b + j)]);
                    }
                }
            }
        }
    }
    Ok(trip.build())
}

/// Element masses `ρ V_init det A`.
pub fn element_masses(field: &PlasticField, pre: &ElementPrecomp, mat: &MaterialParams) -> Result<Vec<f64>> {
    (0..pre.num_elements())
        .map(|t| {
            let det = field.matrix(t).determinant();
            if !(det > 0.0) {
                return Err(Error::SingularPlastic(t));
            }
            Ok(mat.density * pre.volume_init[t] * det)
        })
        .collect()
}

/// Lumped mass: each element gives a quarter of its mass to each vertex.
/// Returned as the `3N` diagonal.
pub fn mass_matrix(field: &PlasticField, pre: &ElementPrecomp, mat: &MaterialParams) -> Result<DVector<f64>> {
    let masses = element_masses(field, pre, mat)?;
    let mut diag = DVector::zeros(pre.ndof());
    for (e, m) in pre.elements.iter().zip(masses) {
        for &v in e {
            for d in 0..3 {
                diag[3 * v + d] += 0.25 * m;
            }
        }
    }
    Ok(diag)
}

/// Per-element Cauchy and von Mises stress.
#[derive(Debug, Clone, PartialEq)]
pub struct StressField {
    pub cauchy: Vec<Matrix3<f64>>,
    pub von_mises: Vec<f64>,
    /// Elements with `det Fe ≤ 0`; their stress is still reported.
    pub inverted: Vec<usize>,
}

impl StressField {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tet_id,vm_pa,s00,s01,s02,s11,s12,s22\n");
        for (t, (c, vm)) in self.cauchy.iter().zip(&self.von_mises).enumerate() {
            let _ = writeln!(
                s,
                "{t},{vm:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                c[(0, 0)],
                c[(0, 1)],
                c[(0, 2)],
                c[(1, 1)],
                c[(1, 2)],
                c[(2, 2)]
            );
        }
        s
    }
}

/// `sqrt(3/2 dev σ : dev σ)`.
pub fn von_mises(sigma: &Matrix3<f64>) -> f64 {
    let dev = sigma - Matrix3::identity() * (sigma.trace() / 3.0);
    (1.5 * dev.norm_squared()).sqrt()
}

pub fn stress_field(
    x: &DVector<f64>,
    field: &PlasticField,
    pre: &ElementPrecomp,
    mat: &MaterialParams,
) -> Result<StressField> {
    check_dims(x, field, pre)?;
    let z = pre.num_elements();
    let mut out = StressField {
        cauchy: Vec::with_capacity(z),
        von_mises: Vec::with_capacity(z),
        inverted: Vec::new(),
    };
    for t in 0..z {
        let s = element_state(x, field, pre, t)?;
        let j = s.fe.determinant();
        if j <= 0.0 {
            out.inverted.push(t);
        }
        let j = if j.abs() < f64::MIN_POSITIVE { f64::MIN_POSITIVE } else { j };
        let sigma = pk1_stress(&s.fe, mat) * s.fe.transpose() / j;
        let sigma = (sigma + sigma.transpose()) * 0.5;
        out.von_mises.push(von_mises(&sigma));
        out.cauchy.push(sigma);
    }
    Ok(out)
}

//! Task losses on the static shape and the smoothness regularizer on the
//! plastic field, with analytic gradients.

use nalgebra::{DVector, Vector2, Vector3};

use crate::elasticity::{element_masses, ElementPrecomp, MaterialParams};
use crate::error::{Error, Result};
use crate::mesh::{center_of_mass, polygon_centroid, support_polygon, vertex, TetMesh};
use crate::plastic::{coeff_basis, PlasticField};
use crate::sparse::{CsrMatrix, TripletBuilder};

/// `‖x − target‖²` and its gradient `2 (x − target)`.
pub fn matching_loss(x: &DVector<f64>, target: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if x.len() != target.len() {
        return Err(Error::DimensionMismatch { expected: target.len(), got: x.len() });
    }
    let d = x - target;
    Ok((d.norm_squared(), 2.0 * d))
}

/// Squared planar distance between the projected center of mass and `c_hat`.
/// The gradient is with respect to `x`, element masses held fixed.
pub fn stability_loss(
    x: &DVector<f64>,
    mesh: &TetMesh,
    element_mass: &[f64],
    c_hat: &Vector2<f64>,
) -> Result<(f64, DVector<f64>)> {
    let com = center_of_mass(mesh, x, element_mass)?;
    let total: f64 = element_mass.iter().sum();
    let r = com.xy() - c_hat;
    let mut grad = DVector::zeros(x.len());
    for (e, &m) in mesh.elements().iter().zip(element_mass) {
        let w = 2.0 * m / (4.0 * total);
        for &v in e {
            grad[3 * v] += w * r.x;
            grad[3 * v + 1] += w * r.y;
        }
    }
    Ok((r.norm_squared(), grad))
}

/// Derivative of [`stability_loss`] with respect to each element mass.
pub fn stability_loss_mass_gradient(
    x: &DVector<f64>,
    mesh: &TetMesh,
    element_mass: &[f64],
    c_hat: &Vector2<f64>,
) -> Result<Vec<f64>> {
    let com = center_of_mass(mesh, x, element_mass)?;
    let total: f64 = element_mass.iter().sum();
    let r = com.xy() - c_hat;
    Ok(mesh
        .elements()
        .iter()
        .map(|e| {
            let c = e.iter().map(|&v| vertex(x, v)).sum::<Vector3<f64>>() / 4.0;
            2.0 * r.dot(&(c - com).xy()) / total
        })
        .collect())
}

/// Face-adjacency graph Laplacian over elements, `D − A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementLaplacian(pub CsrMatrix);

pub fn element_laplacian(mesh: &TetMesh) -> ElementLaplacian {
    let z = mesh.num_elements();
    let mut t = TripletBuilder::new(z, z);
    let mut degree = vec![0.0; z];
    for (a, b) in mesh.face_adjacency() {
        t.push(a, b, -1.0);
        t.push(b, a, -1.0);
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    for (i, d) in degree.into_iter().enumerate() {
        t.push(i, i, d);
    }
    ElementLaplacian(t.build())
}

/// `weight Σ_c ‖L f_c‖²` over the six coefficient channels, and its gradient.
pub fn biharmonic_reg(field: &PlasticField, lap: &ElementLaplacian, weight: f64) -> Result<(f64, DVector<f64>)> {
    let z = field.len();
    if lap.0.nrows() != z {
        return Err(Error::DimensionMismatch { expected: lap.0.nrows(), got: z });
    }
    let mut value = 0.0;
    let mut grad = DVector::zeros(6 * z);
    for c in 0..6 {
        let f = DVector::from_iterator(z, field.coeffs().iter().map(|k| k[c]));
        let lf = lap.0.mul_vec(&f);
        value += lf.norm_squared();
        let g = lap.0.tr_mul_vec(&lf);
        for t in 0..z {
            grad[6 * t + c] = 2.0 * weight * g[t];
        }
    }
    Ok((weight * value, grad))
}

/// Area centroid of the support polygon of `x`.
pub fn auto_c_hat(mesh: &TetMesh, x: &DVector<f64>, contact_tol: f64) -> Result<Vector2<f64>> {
    let s = support_polygon(mesh, x, contact_tol);
    if s.is_degenerate() {
        return Err(Error::DegenerateSupport);
    }
    polygon_centroid(&s.hull).ok_or(Error::DegenerateSupport)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// Match the static shape to a target configuration.
    Match { target: DVector<f64> },
    /// Bring the projected center of mass to `c_hat` (support centroid when `None`).
    Stand { c_hat: Option<Vector2<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: LossKind,
    pub reg_weight: f64,
    /// When set, the regularizer weight is `reg_weight × (initial loss)`.
    pub reg_relative: bool,
    /// Contact tolerance for the automatic `c_hat`; `None` = 1e-3 × bbox diagonal.
    pub contact_tol: Option<f64>,
}

impl ObjectiveSpec {
    pub fn matching(target: DVector<f64>) -> Self {
        Self {
            kind: LossKind::Match { target },
            reg_weight: 1e-2,
            reg_relative: true,
            contact_tol: None,
        }
    }

    pub fn standing(c_hat: Option<Vector2<f64>>) -> Self {
        Self {
            kind: LossKind::Stand { c_hat },
            reg_weight: 1e-2,
            reg_relative: true,
            contact_tol: None,
        }
    }

    pub fn with_reg(mut self, weight: f64, relative: bool) -> Self {
        self.reg_weight = weight;
        self.reg_relative = relative;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedLoss {
    Match(DVector<f64>),
    Stand(Vector2<f64>),
}

/// An objective with its target fixed and its regularizer weight made absolute.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: ResolvedLoss,
    pub reg_weight: f64,
    pub laplacian: ElementLaplacian,
}

/// Objective terms and partial derivatives at one `(field, x)` pair.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub total: f64,
    pub loss: f64,
    pub reg: f64,
    /// `∂L/∂x`
    pub dloss_dx: DVector<f64>,
    /// `∂J/∂F_p` at fixed `x`: regularizer plus any direct loss dependence.
    pub explicit_dfp: DVector<f64>,
}

impl Objective {
    /// Freezes `c_hat` and the regularizer scale from the initial static shape.
    pub fn resolve(
        spec: &ObjectiveSpec,
        mesh: &TetMesh,
        x_start: &DVector<f64>,
        field: &PlasticField,
        pre: &ElementPrecomp,
        mat: &MaterialParams,
    ) -> Result<Self> {
        if !(spec.reg_weight >= 0.0) {
            return Err(Error::Invalid(format!("reg_weight must be ≥ 0, got {}", spec.reg_weight)));
        }
        let loss = match &spec.kind {
            LossKind::Match { target } => {
                if target.len() != 3 * mesh.num_vertices() {
                    return Err(Error::DimensionMismatch { expected: 3 * mesh.num_vertices(), got: target.len() });
                }
                ResolvedLoss::Match(target.clone())
            }
            LossKind::Stand { c_hat: Some(c) } => ResolvedLoss::Stand(*c),
            LossKind::Stand { c_hat: None } => {
                let tol = spec.contact_tol.unwrap_or(1e-3 * crate::mesh::flat_bbox_diagonal(x_start));
                ResolvedLoss::Stand(auto_c_hat(mesh, x_start, tol)?)
            }
        };
        let mut obj = Self {
            loss,
            reg_weight: spec.reg_weight,
            laplacian: element_laplacian(mesh),
        };
        if spec.reg_relative {
            let initial = obj.loss_value(mesh, x_start, field, pre, mat)?;
            obj.reg_weight = spec.reg_weight * initial;
        }
        Ok(obj)
    }

    fn loss_value(
        &self,
        mesh: &TetMesh,
        x: &DVector<f64>,
        field: &PlasticField,
        pre: &ElementPrecomp,
        mat: &MaterialParams,
    ) -> Result<f64> {
        Ok(match &self.loss {
            ResolvedLoss::Match(t) => matching_loss(x, t)?.0,
            ResolvedLoss::Stand(c) => stability_loss(x, mesh, &element_masses(field, pre, mat)?, c)?.0,
        })
    }

    pub fn evaluate(
        &self,
        mesh: &TetMesh,
        x: &DVector<f64>,
        field: &PlasticField,
        pre: &ElementPrecomp,
        mat: &MaterialParams,
    ) -> Result<ObjectiveValue> {
        let (reg, mut explicit_dfp) = biharmonic_reg(field, &self.laplacian, self.reg_weight)?;
        let (loss, dloss_dx) = match &self.loss {
            ResolvedLoss::Match(t) => matching_loss(x, t)?,
            ResolvedLoss::Stand(c) => {
                let masses = element_masses(field, pre, mat)?;
                let out = stability_loss(x, mesh, &masses, c)?;
                // masses scale with det A: dm/dA_c = m tr(A⁻¹ E_c)
                let dl_dm = stability_loss_mass_gradient(x, mesh, &masses, c)?;
                for t in 0..field.len() {
                    let a_inv = field.matrix(t).try_inverse().ok_or(Error::SingularPlastic(t))?;
                    for k in 0..6 {
                        explicit_dfp[6 * t + k] += dl_dm[t] * masses[t] * (a_inv * coeff_basis(k)).trace();
                    }
                }
                out
            }
        };
        Ok(ObjectiveValue {
            total: loss + reg,
            loss,
            reg,
            dloss_dx,
            explicit_dfp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::box_mesh;
    use nalgebra::{DMatrix, Matrix3};

    fn pseudo_random(n: usize, seed: u64) -> DVector<f64> {
        let mut s = seed;
        DVector::from_fn(n, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / (1u64 << 53) as f64 - 0.5
        })
    }

    fn chain(k: usize) -> TetMesh {
        // tets glued face to face along a line: (i, i+1, i+2, i+3)
        let n = k + 3;
        let positions = (0..n)
            .map(|i| {
                let a = i as f64 * 2.0 * std::f64::consts::PI / 3.0;
                Vector3::new(a.cos(), a.sin(), i as f64 * 0.5)
            })
            .collect();
        let elements = (0..k).map(|i| [i, i + 1, i + 2, i + 3]).collect();
        TetMesh::new(positions, elements).unwrap().validate_and_orient(1e-12).unwrap()
    }

    #[test]
    fn matching_loss_arithmetic() {
        let t = DVector::from_vec(vec![0.0; 6]);
        let (v, g) = matching_loss(&t, &t).unwrap();
        assert_eq!((v, g.amax()), (0.0, 0.0));
        let mut x = t.clone();
        x[3] = 1.0;
        let (v, g) = matching_loss(&x, &t).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g[3], 2.0);
        assert!(matches!(matching_loss(&x, &DVector::zeros(3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn matching_gradient_matches_fd() {
        let x = pseudo_random(30, 3);
        let t = pseudo_random(30, 4);
        let (_, g) = matching_loss(&x, &t).unwrap();
        let h = 1e-6;
        for i in 0..30 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (matching_loss(&xp, &t).unwrap().0 - matching_loss(&xm, &t).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-8 * g.amax().max(1.0));
        }
    }

    #[test]
    fn stability_loss_offset_and_projection() {
        let mesh = TetMesh::new(vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()], vec![[0, 1, 2, 3]]).unwrap();
        let x = mesh.flat_positions();
        let (v, g) = stability_loss(&x, &mesh, &[1.0], &Vector2::new(0.25, 0.25)).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.amax(), 0.0);
        let (v, g) = stability_loss(&x, &mesh, &[1.0], &Vector2::new(0.25 + 0.3, 0.25)).unwrap();
        assert!((v - 0.09).abs() < 1e-15);
        for i in 0..4 {
            assert_eq!(g[3 * i + 2], 0.0);
        }
    }

    #[test]
    fn stability_gradient_matches_fd() {
        let mesh = box_mesh([2, 1, 1], Vector3::new(0.3, 0.2, 0.25), Vector3::zeros());
        let x = mesh.flat_positions() + pseudo_random(3 * mesh.num_vertices(), 9) * 0.05;
        let masses: Vec<f64> = (0..mesh.num_elements()).map(|t| 1.0 + t as f64 * 0.3).collect();
        let c = Vector2::new(0.1, 0.4);
        let (_, g) = stability_loss(&x, &mesh, &masses, &c).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (stability_loss(&xp, &mesh, &masses, &c).unwrap().0 - stability_loss(&xm, &mesh, &masses, &c).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g.amax());
        }
        let gm = stability_loss_mass_gradient(&x, &mesh, &masses, &c).unwrap();
        for t in 0..masses.len() {
            let mut mp = masses.clone();
            mp[t] += h;
            let mut mm = masses.clone();
            mm[t] -= h;
            let fd = (stability_loss(&x, &mesh, &mp, &c).unwrap().0 - stability_loss(&x, &mesh, &mm, &c).unwrap().0) / (2.0 * h);
            assert!((fd - gm[t]).abs() <= 1e-6 * gm.iter().fold(0.0f64, |a, b| a.max(b.abs())));
        }
    }

    #[test]
    fn laplacian_of_small_meshes() {
        let one = chain(1);
        assert_eq!(element_laplacian(&one).0.to_dense(), DMatrix::zeros(1, 1));
        let two = element_laplacian(&chain(2)).0.to_dense();
        assert_eq!(two, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn chain_laplacian_spectrum() {
        let k = 7;
        let l = element_laplacian(&chain(k)).0.to_dense();
        for r in 0..k {
            assert_eq!(l.row(r).sum(), 0.0);
        }
        let mut eig: Vec<f64> = l.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut expected: Vec<f64> = (0..k).map(|j| 2.0 - 2.0 * (std::f64::consts::PI * j as f64 / k as f64).cos()).collect();
        expected.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(eig[0] >= -1e-12);
    }

    #[test]
    fn biharmonic_values() {
        let lap = element_laplacian(&chain(2));
        let uniform = PlasticField::from_matrices(&[Matrix3::new(1.2, 0.1, 0.0, 0.1, 0.8, 0.0, 0.0, 0.0, 1.0); 2]);
        let (v, g) = biharmonic_reg(&uniform, &lap, 3.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.amax(), 0.0);
        let delta = 0.25;
        let mut coeffs = PlasticField::identity(2).coeffs().to_vec();
        coeffs[1][4] += delta;
        let (v, _) = biharmonic_reg(&PlasticField::from_coeffs(coeffs), &lap, 3.0).unwrap();
        assert!((v - 3.0 * 2.0 * delta * delta).abs() < 1e-15);
    }

    #[test]
    fn biharmonic_gradient_matches_fd() {
        let mesh = box_mesh([2, 2, 1], Vector3::repeat(1.0), Vector3::zeros());
        let lap = element_laplacian(&mesh);
        let v = pseudo_random(6 * mesh.num_elements(), 17);
        let field = PlasticField::from_vector(&v).unwrap();
        let (_, g) = biharmonic_reg(&field, &lap, 0.7).unwrap();
        let h = 1e-6;
        for i in 0..v.len() {
            let mut vp = v.clone();
            vp[i] += h;
            let mut vm = v.clone();
            vm[i] -= h;
            let fd = (biharmonic_reg(&PlasticField::from_vector(&vp).unwrap(), &lap, 0.7).unwrap().0
                - biharmonic_reg(&PlasticField::from_vector(&vm).unwrap(), &lap, 0.7).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-8 * g.amax().max(1.0));
        }
        // adding a constant matrix everywhere changes nothing
        let shifted = PlasticField::from_vector(&(v.clone() + DVector::from_fn(v.len(), |i, _| [0.3, -0.1, 0.2, 0.0, 0.5, 1.0][i % 6]))).unwrap();
        let (a, _) = biharmonic_reg(&field, &lap, 0.7).unwrap();
        let (b, _) = biharmonic_reg(&shifted, &lap, 0.7).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn auto_c_hat_footprints() {
        let m = box_mesh([2, 2, 1], Vector3::new(0.5, 0.25, 0.3), Vector3::new(1.0, 1.0, 0.0));
        let c = auto_c_hat(&m, &m.flat_positions(), 1e-6).unwrap();
        assert!((c - Vector2::new(1.5, 1.25)).norm() < 1e-12);
        // L-shaped footprint: 3 of 4 cells of a 2×2 block
        let l = box_mesh([2, 2, 1], Vector3::repeat(1.0), Vector3::zeros());
        let keep: Vec<[usize; 4]> = l
            .elements()
            .iter()
            .enumerate()
            .filter(|(t, _)| t / 5 != 3)
            .map(|(_, e)| *e)
            .collect();
        let lmesh = TetMesh::new(l.positions().to_vec(), keep).unwrap();
        // only vertices used by elements rest on the ground; the unused corner (2,2,0) must be excluded
        let used: std::collections::BTreeSet<usize> = lmesh.elements().iter().flatten().copied().collect();
        let mut x = lmesh.flat_positions();
        for v in 0..lmesh.num_vertices() {
            if !used.contains(&v) {
                x[3 * v + 2] = 5.0;
            }
        }
        let c = auto_c_hat(&lmesh, &x, 1e-6).unwrap();
        // convex hull of the L is the square minus the corner triangle: shoelace oracle
        let hull = [
            Vector2::new(0.0, 0.0),
            Vector2::new(2.0, 0.0),
            Vector2::new(2.0, 1.0),
            Vector2::new(1.0, 2.0),
            Vector2::new(0.0, 2.0),
        ];
        let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for i in 0..5 {
            let (p, q) = (hull[i], hull[(i + 1) % 5]);
            let w = p.x * q.y - q.x * p.y;
            a += w / 2.0;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
        }
        let oracle = Vector2::new(cx / (6.0 * a), cy / (6.0 * a));
        assert!((c - oracle).norm() < 1e-12);
    }
}

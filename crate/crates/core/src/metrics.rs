//! Physical-compatibility metrics computed from an equilibrium shape.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::elasticity::{element_masses, stress_field, ElementPrecomp, MaterialParams, StressField};
use crate::equilibrium::{solve_static, ExternalLoad, SolverConfig};
use crate::error::{Error, Result};
use crate::mesh::{center_of_mass, flat_bbox_diagonal, support_polygon, vertex, TetMesh};
use crate::plastic::PlasticField;

/// Mean von Mises stress, optionally weighted by element volume.
pub fn mean_stress(stress: &StressField, volumes: Option<&[f64]>) -> f64 {
    let vm = &stress.von_mises;
    if vm.is_empty() {
        return 0.0;
    }
    match volumes {
        None => vm.iter().sum::<f64>() / vm.len() as f64,
        Some(w) => {
            let total: f64 = w.iter().sum();
            vm.iter().zip(w).map(|(s, v)| s * v).sum::<f64>() / total
        }
    }
}

/// Signed distance from the projected center of mass to the support polygon
/// boundary, positive inside; negative infinity for degenerate support.
pub fn stability_margin(mesh: &TetMesh, x: &DVector<f64>, element_mass: &[f64], contact_tol: f64) -> Result<f64> {
    let com = center_of_mass(mesh, x, element_mass)?;
    Ok(support_polygon(mesh, x, contact_tol).signed_margin(&com.xy()))
}

/// Whether the projected center of mass lies inside the support polygon
/// shrunk by `margin`. Points on the boundary count as inside.
pub fn standability(mesh: &TetMesh, x: &DVector<f64>, element_mass: &[f64], contact_tol: f64, margin: f64) -> Result<bool> {
    let m = stability_margin(mesh, x, element_mass, contact_tol)?;
    let slack = 1e-12 * flat_bbox_diagonal(x);
    Ok(m >= margin - slack)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewAxis {
    #[serde(rename = "+x")]
    PosX,
    #[serde(rename = "-x")]
    NegX,
    #[serde(rename = "+y")]
    PosY,
    #[serde(rename = "-y")]
    NegY,
    #[serde(rename = "+z")]
    PosZ,
    #[serde(rename = "-z")]
    NegZ,
}

impl FromStr for ViewAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "+x" | "x" => Self::PosX,
            "-x" => Self::NegX,
            "+y" | "y" => Self::PosY,
            "-y" => Self::NegY,
            "+z" | "z" => Self::PosZ,
            "-z" => Self::NegZ,
            _ => return Err(Error::Invalid(format!("unknown view axis `{s}`"))),
        })
    }
}

impl ViewAxis {
    /// Image-plane (right, up) directions for a camera looking along the axis.
    fn frame(self) -> (Vector3<f64>, Vector3<f64>) {
        let (d, up) = match self {
            Self::PosX => (Vector3::x(), Vector3::z()),
            Self::NegX => (-Vector3::x(), Vector3::z()),
            Self::PosY => (Vector3::y(), Vector3::z()),
            Self::NegY => (-Vector3::y(), Vector3::z()),
            Self::PosZ => (Vector3::z(), Vector3::y()),
            Self::NegZ => (-Vector3::z(), Vector3::y()),
        };
        (d.cross(&up), up)
    }

    fn project(self, p: &Vector3<f64>) -> Vector2<f64> {
        let (u, v) = self.frame();
        Vector2::new(u.dot(p), v.dot(p))
    }
}

/// Square pixel grid over the image plane.
#[derive(Debug, Clone, Copy)]
struct Raster {
    origin: Vector2<f64>,
    pixel: f64,
    resolution: usize,
}

impl Raster {
    fn center(&self, i: usize, j: usize) -> Vector2<f64> {
        self.origin + Vector2::new((i as f64 + 0.5) * self.pixel, (j as f64 + 0.5) * self.pixel)
    }

    fn fill(&self, tris: &[[Vector2<f64>; 3]]) -> Vec<bool> {
        let n = self.resolution;
        let mut mask = vec![false; n * n];
        for tri in tris {
            let [a, mut b, mut c] = *tri;
            let area = (b - a).perp(&(c - a));
            if area == 0.0 {
                continue;
            }
            if area < 0.0 {
                std::mem::swap(&mut b, &mut c);
            }
            let lo = a.inf(&b).inf(&c);
            let hi = a.sup(&b).sup(&c);
            let to_idx = |t: f64| ((t / self.pixel) - 0.5).floor();
            let i0 = to_idx(lo.x - self.origin.x).max(0.0) as usize;
            let j0 = to_idx(lo.y - self.origin.y).max(0.0) as usize;
            let i1 = (to_idx(hi.x - self.origin.x) + 1.0).clamp(0.0, (n - 1) as f64) as usize;
            let j1 = (to_idx(hi.y - self.origin.y) + 1.0).clamp(0.0, (n - 1) as f64) as usize;
            let edges = [(a, b), (b, c), (c, a)];
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let p = self.center(i, j);
                    if edges.iter().all(|&(s, e)| edge_covers(s, e, p)) {
                        mask[j * n + i] = true;
                    }
                }
            }
        }
        mask
    }
}

/// Half-plane test for a counter-clockwise edge. Ties go to top and left
/// edges so that pixels on a shared edge are claimed exactly once.
fn edge_covers(s: Vector2<f64>, e: Vector2<f64>, p: Vector2<f64>) -> bool {
    let d = e - s;
    let w = d.perp(&(p - s));
    if w != 0.0 {
        return w > 0.0;
    }
    let top = d.y == 0.0 && d.x < 0.0;
    let left = d.y < 0.0;
    top || left
}

fn projected_faces(mesh: &TetMesh, x: &DVector<f64>, axis: ViewAxis) -> Result<Vec<[Vector2<f64>; 3]>> {
    Ok(mesh
        .boundary_surface()?
        .iter()
        .map(|f| f.map(|v| axis.project(&vertex(x, v))))
        .collect())
}

/// Binary silhouette masks of two shapes on a shared grid covering the union
/// of their projections with 5% padding.
pub fn silhouette_masks(
    a: (&TetMesh, &DVector<f64>),
    b: (&TetMesh, &DVector<f64>),
    axis: ViewAxis,
    resolution: usize,
) -> Result<(Vec<bool>, Vec<bool>)> {
    if resolution < 16 {
        return Err(Error::Invalid(format!("silhouette resolution must be ≥ 16, got {resolution}")));
    }
    let ta = projected_faces(a.0, a.1, axis)?;
    let tb = projected_faces(b.0, b.1, axis)?;
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for p in ta.iter().chain(&tb).flatten() {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let side = (hi - lo).max() * 1.1;
    if !(side > 0.0) || !side.is_finite() {
        return Err(Error::EmptySilhouette);
    }
    let center = (lo + hi) * 0.5;
    let raster = Raster {
        origin: center - Vector2::repeat(side / 2.0),
        pixel: side / resolution as f64,
        resolution,
    };
    let ma = raster.fill(&ta);
    let mb = raster.fill(&tb);
    if !ma.iter().any(|&m| m) || !mb.iter().any(|&m| m) {
        return Err(Error::EmptySilhouette);
    }
    Ok((ma, mb))
}

/// Mean absolute difference of the two binary silhouettes.
pub fn silhouette_loss(
    a: (&TetMesh, &DVector<f64>),
    b: (&TetMesh, &DVector<f64>),
    axis: ViewAxis,
    resolution: usize,
) -> Result<f64> {
    let (ma, mb) = silhouette_masks(a, b, axis, resolution)?;
    let differ = ma.iter().zip(&mb).filter(|(p, q)| p != q).count();
    Ok(differ as f64 / ma.len() as f64)
}

/// `count` log-spaced thresholds from `lo` to `hi` inclusive.
pub fn log_thresholds(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

pub fn default_thresholds() -> Vec<f64> {
    log_thresholds(10.0, 1e6, 64)
}

/// Fraction of elements whose von Mises stress exceeds each threshold.
pub fn fracture_curve(stress: &StressField, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid("fracture thresholds must be strictly increasing".into()));
    }
    let z = stress.von_mises.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, stress.von_mises.iter().filter(|&&s| s > t).count() as f64 / z))
        .collect())
}

/// Trapezoid area under a fracture curve, in Pa.
pub fn fracture_auc(curve: &[(f64, f64)]) -> f64 {
    curve.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub axis: ViewAxis,
    pub resolution: usize,
    /// `None` uses [`default_thresholds`].
    pub thresholds: Option<Vec<f64>>,
    /// `None` = 1e-3 × bbox diagonal of the static shape.
    pub contact_tol: Option<f64>,
    pub margin: f64,
    pub volume_weighted: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            axis: ViewAxis::PosY,
            resolution: 256,
            thresholds: None,
            contact_tol: None,
            margin: 0.0,
            volume_weighted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSummary {
    pub converged: bool,
    pub residual: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub cc: usize,
    /// Element count and rest volume, for pooling means across objects.
    pub num_elements: usize,
    pub volume_m3: f64,
    pub mean_stress_pa: Option<f64>,
    pub standable: Option<bool>,
    pub silhouette_loss: Option<f64>,
    pub fracture_auc: Option<f64>,
    pub fracture_curve: Vec<(f64, f64)>,
    pub solver: Option<SolverSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricsReport {
    /// `threshold_pa,fraction`
    pub fn fracture_csv(&self) -> String {
        let mut s = String::from("threshold_pa,fraction\n");
        for (t, f) in &self.fracture_curve {
            let _ = writeln!(s, "{t:.16e},{f:.16e}");
        }
        s
    }
}

/// Solves equilibrium for `field` (identity when `None`) and evaluates every
/// metric. Solver failures are recorded in the report instead of returned.
pub fn evaluate_all(
    mesh: &TetMesh,
    field: Option<&PlasticField>,
    mat: &MaterialParams,
    load: &ExternalLoad,
    target: Option<(&TetMesh, &DVector<f64>)>,
    cfg: &MetricsConfig,
    solver: &SolverConfig,
) -> MetricsReport {
    let cc = mesh.connected_components().0;
    let mut report = MetricsReport {
        cc,
        num_elements: mesh.num_elements(),
        volume_m3: mesh.element_volumes().iter().sum(),
        mean_stress_pa: None,
        standable: None,
        silhouette_loss: None,
        fracture_auc: None,
        fracture_curve: Vec::new(),
        solver: None,
        error: None,
    };
    if let Err(e) = fill_report(&mut report, mesh, field, mat, load, target, cfg, solver) {
        report.error = Some(e.to_string());
    }
    report
}

#[allow(clippy::too_many_arguments)]
fn fill_report(
    report: &mut MetricsReport,
    mesh: &TetMesh,
    field: Option<&PlasticField>,
    mat: &MaterialParams,
    load: &ExternalLoad,
    target: Option<(&TetMesh, &DVector<f64>)>,
    cfg: &MetricsConfig,
    solver: &SolverConfig,
) -> Result<()> {
    let pre = ElementPrecomp::new(mesh)?;
    let identity;
    let field = match field {
        Some(f) => f,
        None => {
            identity = PlasticField::identity(mesh.num_elements());
            &identity
        }
    };
    let sol = solve_static(&pre, field, mat, load, &mesh.flat_positions(), solver)?;
    report.solver = Some(SolverSummary {
        converged: sol.converged,
        residual: sol.residual_inf,
        iters: sol.iterations,
    });
    let x = &sol.x_static;
    let stress = stress_field(x, field, &pre, mat)?;
    let volumes = cfg.volume_weighted.then(|| mesh.element_volumes());
    report.mean_stress_pa = Some(mean_stress(&stress, volumes.as_deref()));
    let masses = element_masses(field, &pre, mat)?;
    let tol = cfg.contact_tol.unwrap_or(1e-3 * flat_bbox_diagonal(x));
    report.standable = Some(standability(mesh, x, &masses, tol, cfg.margin)?);
    let thresholds = cfg.thresholds.clone().unwrap_or_else(default_thresholds);
    report.fracture_curve = fracture_curve(&stress, &thresholds)?;
    report.fracture_auc = Some(fracture_auc(&report.fracture_curve));
    if let Some(target) = target {
        report.silhouette_loss = Some(silhouette_loss((mesh, x), target, cfg.axis, cfg.resolution)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::box_mesh;
    use nalgebra::Matrix3;

    fn stress_of(vm: &[f64]) -> StressField {
        StressField {
            cauchy: vec![Matrix3::zeros(); vm.len()],
            von_mises: vm.to_vec(),
            inverted: vec![],
        }
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    #[test]
    fn mean_stress_arithmetic() {
        assert_eq!(mean_stress(&stress_of(&[0.0, 0.0]), None), 0.0);
        assert_eq!(mean_stress(&stress_of(&[1e3, 3e3]), None), 2e3);
        assert_eq!(mean_stress(&stress_of(&[1e3, 3e3]), Some(&[3.0, 1.0])), 1.5e3);
        let r: Vec<f64> = lcg(5, 97).iter().map(|u| u * 1e4).collect();
        let mut oracle = 0.0;
        for v in &r {
            oracle += v;
        }
        oracle /= r.len() as f64;
        assert!((mean_stress(&stress_of(&r), None) - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn fracture_counts() {
        let zero = fracture_curve(&stress_of(&[0.0; 4]), &default_thresholds()).unwrap();
        assert!(zero.iter().all(|&(_, f)| f == 0.0));
        assert_eq!(fracture_auc(&zero), 0.0);
        let step = fracture_curve(&stress_of(&[500.0; 3]), &[100.0, 499.0, 500.0, 501.0]).unwrap();
        assert_eq!(step.iter().map(|p| p.1).collect::<Vec<_>>(), vec![1.0, 1.0, 0.0, 0.0]);
        let r: Vec<f64> = lcg(11, 200).iter().map(|u| 10f64.powf(1.0 + 5.0 * u)).collect();
        let th = default_thresholds();
        let curve = fracture_curve(&stress_of(&r), &th).unwrap();
        for (k, &(t, f)) in curve.iter().enumerate() {
            let mut n = 0;
            for s in &r {
                if *s > t {
                    n += 1;
                }
            }
            assert_eq!(f, n as f64 / 200.0);
            if k > 0 {
                assert!(f <= curve[k - 1].1);
            }
        }
        assert!(fracture_curve(&stress_of(&r), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn thresholds_are_log_spaced() {
        let t = default_thresholds();
        assert_eq!(t.len(), 64);
        assert!((t[0] - 10.0).abs() < 1e-9 && (t[63] - 1e6).abs() < 1e-3);
        let r = t[1] / t[0];
        assert!(t.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-9));
    }

    #[test]
    fn standability_cases() {
        let m = box_mesh([2, 2, 2], Vector3::repeat(0.5), Vector3::zeros());
        let x = m.flat_positions();
        let uniform = vec![1.0; m.num_elements()];
        assert!(standability(&m, &x, &uniform, 1e-6, 0.0).unwrap());
        assert!(!standability(&m, &x, &uniform, 1e-6, 0.6).unwrap());
        // all mass in one far element, beyond the footprint after shifting the mesh top
        let mut shifted = x.clone();
        for v in 0..m.num_vertices() {
            if x[3 * v + 2] > 0.1 {
                shifted[3 * v] += 2.0;
            }
        }
        assert!(!standability(&m, &shifted, &uniform, 1e-6, 0.0).unwrap());
        // translating in-plane changes nothing
        let mut moved = x.clone();
        for v in 0..m.num_vertices() {
            moved[3 * v] += 7.5;
            moved[3 * v + 1] -= 3.25;
        }
        assert!(standability(&m, &moved, &uniform, 1e-6, 0.0).unwrap());
    }

    #[test]
    fn com_on_hull_edge_is_standable() {
        // the footprint edge x = 0 passes through the center of mass
        let m = TetMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(-1.0, 0.0, 1.0),
                Vector3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2, 3]],
        )
        .unwrap();
        // com x = (0 + 1 + 0 − 1)/4 = 0
        let x = m.flat_positions();
        assert!(standability(&m, &x, &[1.0], 1e-6, 0.0).unwrap());
    }

    fn slab(origin_x: f64) -> TetMesh {
        box_mesh([1, 1, 1], Vector3::new(1.0, 0.1, 1.0), Vector3::new(origin_x, 0.0, 0.0))
    }

    #[test]
    fn silhouette_identity_and_symmetry() {
        let a = box_mesh([3, 2, 2], Vector3::new(0.2, 0.3, 0.25), Vector3::zeros());
        let xa = a.flat_positions();
        for axis in ["+x", "-x", "+y", "-y", "+z", "-z"] {
            let ax: ViewAxis = axis.parse().unwrap();
            assert_eq!(silhouette_loss((&a, &xa), (&a, &xa), ax, 64).unwrap(), 0.0);
        }
        let b = slab(0.3);
        let xb = b.flat_positions();
        let ab = silhouette_loss((&a, &xa), (&b, &xb), ViewAxis::PosY, 64).unwrap();
        let ba = silhouette_loss((&b, &xb), (&a, &xa), ViewAxis::PosY, 64).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn disjoint_squares_sum_their_areas() {
        let a = slab(0.0);
        let b = slab(2.0);
        let res = 200;
        let (ma, mb) = silhouette_masks((&a, &a.flat_positions()), (&b, &b.flat_positions()), ViewAxis::PosY, res).unwrap();
        let fa = ma.iter().filter(|&&m| m).count() as f64 / (res * res) as f64;
        let fb = mb.iter().filter(|&&m| m).count() as f64 / (res * res) as f64;
        assert_eq!(fa, fb);
        let loss = silhouette_loss((&a, &a.flat_positions()), (&b, &b.flat_positions()), ViewAxis::PosY, res).unwrap();
        assert!((loss - 2.0 * fa).abs() < 1e-15);
        // each unit square covers (1 / 3.3)² of the padded frame
        let f = (1.0f64 / 3.3).powi(2);
        assert!((fa - f).abs() <= 4.0 / res as f64 * (1.0 / 3.3));
    }

    #[test]
    fn half_width_translation_matches_overlap_area() {
        let a = slab(0.0);
        let b = slab(0.5);
        let res = 256;
        let loss = silhouette_loss((&a, &a.flat_positions()), (&b, &b.flat_positions()), ViewAxis::PosY, res).unwrap();
        // symmetric difference area 2 × 0.5 × 1 in a frame of side 1.5 × 1.1
        let side = 1.65f64;
        let oracle = 1.0 / (side * side);
        assert!((loss - oracle).abs() <= 2.0 / res as f64, "{loss} vs {oracle}");
    }

    #[test]
    fn small_resolution_rejected() {
        let a = slab(0.0);
        let x = a.flat_positions();
        assert!(matches!(silhouette_loss((&a, &x), (&a, &x), ViewAxis::PosY, 8), Err(Error::Invalid(_))));
    }

    #[test]
    fn component_counts_survive_solver_failure() {
        let a = box_mesh([1, 1, 1], Vector3::repeat(0.1), Vector3::zeros());
        let b = box_mesh([1, 1, 1], Vector3::repeat(0.1), Vector3::new(1.0, 0.0, 0.0));
        let n = a.num_vertices();
        let positions = [a.positions(), b.positions()].concat();
        let elements = a.elements().iter().copied().chain(b.elements().iter().map(|e| e.map(|v| v + n))).collect();
        let two = TetMesh::new(positions, elements).unwrap();
        let x = two.flat_positions();
        let report = evaluate_all(&two, None, &MaterialParams::default(), &ExternalLoad::default(), Some((&two, &x)), &MetricsConfig::default(), &SolverConfig::default());
        assert_eq!(report.cc, 2);
        assert!(report.error.is_some());
        assert!(report.mean_stress_pa.is_none());
    }

    #[test]
    fn softer_cube_deforms_more_under_the_same_load() {
        let m = box_mesh([2, 2, 2], Vector3::repeat(0.05), Vector3::zeros());
        let x = m.flat_positions();
        let bottom: Vec<usize> = (0..m.num_vertices()).filter(|&v| x[3 * v + 2] < 1e-9).collect();
        let load = ExternalLoad::default().fix_at(&bottom, &x);
        let cfg = MetricsConfig { resolution: 128, ..Default::default() };
        let stiff = MaterialParams::new(5e6, 0.45, 1000.0).unwrap();
        let soft = MaterialParams::new(5e4, 0.45, 1000.0).unwrap();
        let rs = evaluate_all(&m, None, &stiff, &load, Some((&m, &x)), &cfg, &SolverConfig::default());
        let rf = evaluate_all(&m, None, &soft, &load, Some((&m, &x)), &cfg, &SolverConfig::default());
        assert_eq!(rs.error, None);
        assert_eq!(rs.standable, Some(true));
        assert!(rs.silhouette_loss.unwrap() < 1e-3);
        assert!(rf.silhouette_loss.unwrap() > rs.silhouette_loss.unwrap());
        // gravity stress is fixed by the load, not the stiffness
        let (a, b) = (rf.mean_stress_pa.unwrap(), rs.mean_stress_pa.unwrap());
        assert!(a > 0.0 && (a - b).abs() < 0.05 * b);
    }

    #[test]
    fn prescribed_stretch_stress_scales_with_stiffness() {
        let m = box_mesh([1, 1, 2], Vector3::repeat(0.05), Vector3::zeros());
        let x = m.flat_positions();
        let mut stretched = x.clone();
        for v in 0..m.num_vertices() {
            stretched[3 * v + 2] *= 1.05;
        }
        let ends: Vec<usize> = (0..m.num_vertices()).filter(|&v| x[3 * v + 2] < 1e-9 || x[3 * v + 2] > 0.1 - 1e-9).collect();
        let load = ExternalLoad::zero_gravity().fix_at(&ends, &stretched);
        let cfg = MetricsConfig { resolution: 64, ..Default::default() };
        let stress = |e: f64| {
            let mat = MaterialParams::new(e, 0.45, 1000.0).unwrap();
            evaluate_all(&m, None, &mat, &load, Some((&m, &x)), &cfg, &SolverConfig::default()).mean_stress_pa.unwrap()
        };
        let (hi, lo) = (stress(5e6), stress(5e4));
        assert!((hi / lo - 100.0).abs() < 1e-6 * 100.0);
    }

    #[test]
    fn rest_configuration_is_stress_free() {
        let m = box_mesh([2, 1, 1], Vector3::repeat(0.05), Vector3::zeros());
        let pre = ElementPrecomp::new(&m).unwrap();
        let mat = MaterialParams::default();
        // a uniform field is compatible, so its rest shape carries no stress
        let field = PlasticField::from_coeffs(vec![[1.1, 0.03, 0.0, 0.97, -0.02, 1.05]; m.num_elements()]);
        let rest = crate::plastic::rest_shape(&field, &m.flat_positions(), &mat, &pre).unwrap();
        let s = stress_field(&rest.x_static, &field, &pre, &mat).unwrap();
        assert!(mean_stress(&s, None) <= 1e-6, "{}", mean_stress(&s, None));
    }
}

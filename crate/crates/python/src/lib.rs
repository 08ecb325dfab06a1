//! Python bindings: meshes, materials, loads, plastic fields, static
//! equilibrium, rest shapes, optimization, metrics and simulation.
//!
//! Positions cross the boundary as lists of `[x, y, z]` rows.

use std::path::PathBuf;

use nalgebra::{DVector, Vector2, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use restshape::dynamics::{simulate as run_simulation, DynamicsConfig, DynamicsState, Simulator};
use restshape::equilibrium::solve_static;
use restshape::mesh::{box_mesh, load_mesh, voxel_mesh, write_obj, write_tet, MeshFormat};
use restshape::metrics::{evaluate_all, MetricsConfig, ViewAxis};
use restshape::objective::ObjectiveSpec;
use restshape::optimizer::{optimize as run_optimize, Method, OptimizeConfig, StopReason};
use restshape::plastic::rest_shape as compute_rest_shape;
use restshape::{Attachment, ElementPrecomp, Error, ExternalLoad, MaterialParams, SolverConfig, TetMesh};

create_exception!(pyrestshape, NumericalError, PyRuntimeError, "A solve, optimization or simulation failed.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Parse { .. }
        | Error::Index { .. }
        | Error::DegenerateElement(_)
        | Error::NonManifoldFace(_)
        | Error::DimensionMismatch { .. }
        | Error::Invalid(_)
        | Error::Io(_) => PyValueError::new_err(e.to_string()),
        _ => NumericalError::new_err(e.to_string()),
    }
}

fn flatten(rows: &[[f64; 3]]) -> DVector<f64> {
    DVector::from_iterator(3 * rows.len(), rows.iter().flatten().copied())
}

fn rows(x: &DVector<f64>) -> Vec<[f64; 3]> {
    x.as_slice().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn check_rows(mesh: &TetMesh, r: &[[f64; 3]]) -> PyResult<DVector<f64>> {
    if r.len() != mesh.num_vertices() {
        return Err(PyValueError::new_err(format!(
            "expected {} positions, got {}",
            mesh.num_vertices(),
            r.len()
        )));
    }
    Ok(flatten(r))
}

/// Tetrahedral mesh with consistently oriented elements.
#[pyclass(name = "Mesh", module = "pyrestshape", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMesh {
    inner: TetMesh,
}

#[pymethods]
impl PyMesh {
    #[new]
    fn new(positions: Vec<[f64; 3]>, elements: Vec<[usize; 4]>) -> PyResult<Self> {
        let m = TetMesh::new(positions.into_iter().map(Vector3::from).collect(), elements).map_err(to_py)?;
        Ok(Self { inner: m.validate_and_orient(0.0).map_err(to_py)? })
    }

    /// Loads a `.tet` or Medit `.mesh` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let fmt = MeshFormat::from_path(&path)
            .ok_or_else(|| PyValueError::new_err("mesh path must end in .tet or .mesh"))?;
        let m = load_mesh(&path, fmt).map_err(to_py)?;
        Ok(Self { inner: m.validate_and_orient(0.0).map_err(to_py)? })
    }

    /// Axis-aligned box of `cells` voxels, five tets each.
    #[staticmethod]
    #[pyo3(signature = (cells, cell_size, origin = [0.0, 0.0, 0.0]))]
    fn box_grid(cells: [usize; 3], cell_size: [f64; 3], origin: [f64; 3]) -> Self {
        Self { inner: box_mesh(cells, cell_size.into(), origin.into()) }
    }

    /// Union of voxels given by integer cell coordinates.
    #[staticmethod]
    #[pyo3(signature = (cells, cell_size, origin = [0.0, 0.0, 0.0]))]
    fn voxels(cells: Vec<[usize; 3]>, cell_size: [f64; 3], origin: [f64; 3]) -> PyResult<Self> {
        Ok(Self { inner: voxel_mesh(&cells, cell_size.into(), origin.into()).map_err(to_py)? })
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.num_vertices()
    }

    #[getter]
    fn num_elements(&self) -> usize {
        self.inner.num_elements()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 3]> {
        rows(&self.inner.flat_positions())
    }

    #[getter]
    fn elements(&self) -> Vec<[usize; 4]> {
        self.inner.elements().to_vec()
    }

    fn bbox_diagonal(&self) -> f64 {
        self.inner.bbox_diagonal()
    }

    fn element_volumes(&self) -> Vec<f64> {
        self.inner.element_volumes()
    }

    fn connected_components(&self) -> usize {
        self.inner.connected_components().0
    }

    /// Same connectivity at new positions.
    fn with_positions(&self, positions: Vec<[f64; 3]>) -> PyResult<Self> {
        let x = check_rows(&self.inner, &positions)?;
        Ok(Self { inner: self.inner.with_positions(&x).map_err(to_py)? })
    }

    fn to_tet(&self) -> String {
        write_tet(&self.inner)
    }

    /// Boundary surface as OBJ text.
    fn boundary_obj(&self) -> PyResult<String> {
        Ok(write_obj(&self.inner, &self.inner.boundary_surface().map_err(to_py)?))
    }

    fn __repr__(&self) -> String {
        format!("Mesh({} vertices, {} tets)", self.inner.num_vertices(), self.inner.num_elements())
    }
}

/// Stable Neo-Hookean material in SI units.
#[pyclass(name = "Material", module = "pyrestshape", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyMaterial {
    inner: MaterialParams,
}

#[pymethods]
impl PyMaterial {
    #[new]
    #[pyo3(signature = (young_pa = 5e4, poisson = 0.45, density = 1000.0))]
    fn new(young_pa: f64, poisson: f64, density: f64) -> PyResult<Self> {
        Ok(Self { inner: MaterialParams::new(young_pa, poisson, density).map_err(to_py)? })
    }

    #[getter]
    fn young_pa(&self) -> f64 {
        self.inner.young_pa
    }

    #[getter]
    fn poisson(&self) -> f64 {
        self.inner.poisson
    }

    #[getter]
    fn density(&self) -> f64 {
        self.inner.density
    }

    fn __repr__(&self) -> String {
        format!(
            "Material(young_pa={}, poisson={}, density={})",
            self.inner.young_pa, self.inner.poisson, self.inner.density
        )
    }
}

/// Gravity, fixed vertices (pinned where they are in the mesh) and springs.
#[pyclass(name = "Load", module = "pyrestshape", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLoad {
    inner: ExternalLoad,
}

#[pymethods]
impl PyLoad {
    /// `fixed` lists vertex indices; `bottom_tol` also fixes every vertex
    /// within that distance of the lowest z. Attachments are
    /// `(vertex, stiffness_n_m, [x, y, z])`.
    #[new]
    #[pyo3(signature = (mesh, gravity = [0.0, 0.0, -9.8], fixed = Vec::new(), bottom_tol = None, attachments = Vec::new()))]
    fn new(
        mesh: &PyMesh,
        gravity: [f64; 3],
        fixed: Vec<usize>,
        bottom_tol: Option<f64>,
        attachments: Vec<(usize, f64, [f64; 3])>,
    ) -> PyResult<Self> {
        let x = mesh.inner.flat_positions();
        let n = mesh.inner.num_vertices();
        let mut fixed = fixed;
        if let Some(tol) = bottom_tol {
            let zmin = (0..n).map(|i| x[3 * i + 2]).fold(f64::INFINITY, f64::min);
            fixed.extend((0..n).filter(|&i| x[3 * i + 2] <= zmin + tol));
        }
        fixed.sort_unstable();
        fixed.dedup();
        if let Some(&bad) = fixed.iter().find(|&&i| i >= n) {
            return Err(PyValueError::new_err(format!("fixed vertex {bad} out of range")));
        }
        let load = ExternalLoad {
            gravity: gravity.into(),
            fixed: Vec::new(),
            attachments: attachments
                .into_iter()
                .map(|(vertex, stiffness, target)| Attachment { vertex, stiffness, target })
                .collect(),
        }
        .fix_at(&fixed, &x);
        load.validate(n).map_err(to_py)?;
        Ok(Self { inner: load })
    }

    #[getter]
    fn fixed(&self) -> Vec<usize> {
        self.inner.fixed.iter().map(|f| f.0).collect()
    }

    #[getter]
    fn gravity(&self) -> [f64; 3] {
        self.inner.gravity.into()
    }
}

/// Per-element symmetric plastic strain, 6 coefficients
/// `[a00, a01, a02, a11, a12, a22]` per tet.
#[pyclass(name = "PlasticField", module = "pyrestshape", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPlasticField {
    inner: restshape::PlasticField,
}

#[pymethods]
impl PyPlasticField {
    #[new]
    fn new(coeffs: Vec<[f64; 6]>) -> Self {
        Self { inner: restshape::PlasticField::from_coeffs(coeffs) }
    }

    #[staticmethod]
    fn identity(num_elements: usize) -> Self {
        Self { inner: restshape::PlasticField::identity(num_elements) }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self { inner: restshape::PlasticField::from_text(text).map_err(to_py)? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn coeffs(&self) -> Vec<[f64; 6]> {
        self.inner.coeffs().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Equilibrium", module = "pyrestshape", frozen, get_all)]
struct PyEquilibrium {
    positions: Vec<[f64; 3]>,
    converged: bool,
    residual_n: f64,
    tol_n: f64,
    iterations: usize,
    energy_j: f64,
}

fn identity_or(field: Option<&PyPlasticField>, mesh: &TetMesh) -> restshape::PlasticField {
    field
        .map(|f| f.inner.clone())
        .unwrap_or_else(|| restshape::PlasticField::identity(mesh.num_elements()))
}

/// Static equilibrium from the mesh positions.
#[pyfunction]
#[pyo3(signature = (mesh, material, load, field = None, tol_n = None, max_iters = 200))]
fn solve_equilibrium(
    py: Python<'_>,
    mesh: &PyMesh,
    material: &PyMaterial,
    load: &PyLoad,
    field: Option<&PyPlasticField>,
    tol_n: Option<f64>,
    max_iters: usize,
) -> PyResult<PyEquilibrium> {
    let field = identity_or(field, &mesh.inner);
    let cfg = SolverConfig { tol_force: tol_n, max_iters, ..SolverConfig::default() };
    let sol = py
        .detach(|| {
            let pre = ElementPrecomp::new(&mesh.inner)?;
            solve_static(&pre, &field, &material.inner, &load.inner, &mesh.inner.flat_positions(), &cfg)
        })
        .map_err(to_py)?;
    Ok(PyEquilibrium {
        positions: rows(&sol.x_static),
        converged: sol.converged,
        residual_n: sol.residual_inf,
        tol_n: sol.tol_force,
        iterations: sol.iterations,
        energy_j: sol.energy,
    })
}

/// Force-free shape of `field`, centroid pinned to the mesh's.
#[pyfunction]
fn rest_shape(py: Python<'_>, mesh: &PyMesh, material: &PyMaterial, field: &PyPlasticField) -> PyResult<Vec<[f64; 3]>> {
    let sol = py
        .detach(|| {
            let pre = ElementPrecomp::new(&mesh.inner)?;
            compute_rest_shape(&field.inner, &mesh.inner.flat_positions(), &material.inner, &pre)
        })
        .map_err(to_py)?;
    Ok(rows(&sol.x_static))
}

#[pyclass(name = "OptimizeResult", module = "pyrestshape", frozen, get_all)]
struct PyOptimizeResult {
    field: Py<PyPlasticField>,
    static_positions: Vec<[f64; 3]>,
    initial_loss: f64,
    final_loss: f64,
    objectives: Vec<f64>,
    stop: String,
}

fn optimizer_config(method: &str, step: f64, max_iters: usize) -> PyResult<OptimizeConfig> {
    let method = match method {
        "gd" | "gradient_descent" => Method::GradientDescent,
        "adam" => Method::Adam,
        other => return Err(PyValueError::new_err(format!("unknown method `{other}` (gd or adam)"))),
    };
    Ok(OptimizeConfig { method, step_size: step, max_iters, ..OptimizeConfig::default() })
}

fn run_spec(
    py: Python<'_>,
    mesh: &PyMesh,
    material: &PyMaterial,
    load: &PyLoad,
    spec: ObjectiveSpec,
    cfg: OptimizeConfig,
) -> PyResult<PyOptimizeResult> {
    let r = py
        .detach(|| run_optimize(&mesh.inner, &material.inner, &load.inner, &spec, &cfg, &SolverConfig::default()))
        .map_err(to_py)?;
    let stop = match r.stop {
        StopReason::GradientTolerance => "gradient_tolerance",
        StopReason::Plateau => "plateau",
        StopReason::MaxIterations => "max_iterations",
        StopReason::NoDescent => "no_descent",
    };
    Ok(PyOptimizeResult {
        field: Py::new(py, PyPlasticField { inner: r.field })?,
        static_positions: rows(&r.solution.x_static),
        initial_loss: r.initial_loss,
        final_loss: r.final_loss,
        objectives: r.trace.records.iter().filter(|t| t.accepted).map(|t| t.objective).collect(),
        stop: stop.to_owned(),
    })
}

/// Optimizes the plastic field so the loaded equilibrium matches `target`
/// (default: the mesh positions).
#[pyfunction]
#[pyo3(signature = (mesh, material, load, target = None, method = "gd", step = 1e-2, max_iters = 1000, reg_weight = 1e-2))]
#[allow(clippy::too_many_arguments)]
fn optimize_matching(
    py: Python<'_>,
    mesh: &PyMesh,
    material: &PyMaterial,
    load: &PyLoad,
    target: Option<Vec<[f64; 3]>>,
    method: &str,
    step: f64,
    max_iters: usize,
    reg_weight: f64,
) -> PyResult<PyOptimizeResult> {
    let target = match target {
        Some(t) => check_rows(&mesh.inner, &t)?,
        None => mesh.inner.flat_positions(),
    };
    let spec = ObjectiveSpec::matching(target).with_reg(reg_weight, true);
    run_spec(py, mesh, material, load, spec, optimizer_config(method, step, max_iters)?)
}

/// Optimizes the plastic field so the loaded equilibrium's centre of mass
/// sits over `c_hat` (default: the support polygon centroid).
#[pyfunction]
#[pyo3(signature = (mesh, material, load, c_hat = None, method = "adam", step = 1e-2, max_iters = 1000, reg_weight = 1e-2))]
#[allow(clippy::too_many_arguments)]
fn optimize_standing(
    py: Python<'_>,
    mesh: &PyMesh,
    material: &PyMaterial,
    load: &PyLoad,
    c_hat: Option<[f64; 2]>,
    method: &str,
    step: f64,
    max_iters: usize,
    reg_weight: f64,
) -> PyResult<PyOptimizeResult> {
    let spec = ObjectiveSpec::standing(c_hat.map(Vector2::from)).with_reg(reg_weight, true);
    run_spec(py, mesh, material, load, spec, optimizer_config(method, step, max_iters)?)
}

#[pyclass(name = "Metrics", module = "pyrestshape", frozen, get_all)]
struct PyMetrics {
    cc: usize,
    mean_stress_pa: Option<f64>,
    standable: Option<bool>,
    silhouette_loss: Option<f64>,
    fracture_auc: Option<f64>,
    fracture_curve: Vec<(f64, f64)>,
    converged: Option<bool>,
    error: Option<String>,
}

/// Every evaluation metric at the loaded equilibrium. Solver failures are
/// reported in `error` rather than raised.
#[pyfunction]
#[pyo3(signature = (mesh, material, load, field = None, pair = None, axis = "+y", resolution = 256, volume_weighted = false))]
#[allow(clippy::too_many_arguments)]
fn metrics(
    py: Python<'_>,
    mesh: &PyMesh,
    material: &PyMaterial,
    load: &PyLoad,
    field: Option<&PyPlasticField>,
    pair: Option<&PyMesh>,
    axis: &str,
    resolution: usize,
    volume_weighted: bool,
) -> PyResult<PyMetrics> {
    let axis: ViewAxis = axis.parse().map_err(to_py)?;
    let cfg = MetricsConfig { axis, resolution, volume_weighted, ..MetricsConfig::default() };
    let field = field.map(|f| f.inner.clone());
    let pair_x = pair.map(|p| p.inner.flat_positions());
    let r = py.detach(|| {
        evaluate_all(
            &mesh.inner,
            field.as_ref(),
            &material.inner,
            &load.inner,
            pair.map(|p| &p.inner).zip(pair_x.as_ref()),
            &cfg,
            &SolverConfig::default(),
        )
    });
    Ok(PyMetrics {
        cc: r.cc,
        mean_stress_pa: r.mean_stress_pa,
        standable: r.standable,
        silhouette_loss: r.silhouette_loss,
        fracture_auc: r.fracture_auc,
        fracture_curve: r.fracture_curve,
        converged: r.solver.map(|s| s.converged),
        error: r.error,
    })
}

#[pyclass(name = "Trajectory", module = "pyrestshape", frozen, get_all)]
struct PyTrajectory {
    times: Vec<f64>,
    kinetic_j: Vec<f64>,
    elastic_j: Vec<f64>,
    min_z: Vec<f64>,
    final_positions: Vec<[f64; 3]>,
}

/// Backward-Euler simulation from rest at `initial` (default: mesh
/// positions). Gravity and fixed vertices come from `load`.
#[pyfunction]
#[pyo3(signature = (mesh, material, load, duration_s, field = None, initial = None, dt = 1.0 / 120.0, ground_z = 0.0, k_contact = 1e4))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    mesh: &PyMesh,
    material: &PyMaterial,
    load: &PyLoad,
    duration_s: f64,
    field: Option<&PyPlasticField>,
    initial: Option<Vec<[f64; 3]>>,
    dt: f64,
    ground_z: f64,
    k_contact: f64,
) -> PyResult<PyTrajectory> {
    let field = identity_or(field, &mesh.inner);
    let x0 = match initial {
        Some(r) => check_rows(&mesh.inner, &r)?,
        None => mesh.inner.flat_positions(),
    };
    let cfg = DynamicsConfig {
        dt,
        gravity: load.inner.gravity.into(),
        ground_z,
        k_contact,
        fixed: load.inner.fixed.iter().map(|f| f.0).collect(),
        ..DynamicsConfig::default()
    };
    let traj = py
        .detach(|| {
            let sim = Simulator::new(&mesh.inner, field, material.inner, cfg)?;
            run_simulation(&sim, DynamicsState::at_rest(x0), duration_s)
        })
        .map_err(to_py)?;
    let last = traj.states.last().expect("trajectory has the initial state");
    Ok(PyTrajectory {
        times: traj.summary.iter().map(|s| s.t).collect(),
        kinetic_j: traj.summary.iter().map(|s| s.kinetic_j).collect(),
        elastic_j: traj.summary.iter().map(|s| s.elastic_j).collect(),
        min_z: traj.summary.iter().map(|s| s.min_z).collect(),
        final_positions: rows(&last.x),
    })
}

#[pymodule]
fn pyrestshape(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PyMaterial>()?;
    m.add_class::<PyLoad>()?;
    m.add_class::<PyPlasticField>()?;
    m.add_class::<PyEquilibrium>()?;
    m.add_class::<PyOptimizeResult>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(solve_equilibrium, m)?)?;
    m.add_function(wrap_pyfunction!(rest_shape, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_matching, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_standing, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let r = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(rows(&flatten(&r)), r);
    }

    #[test]
    fn input_errors_and_numerical_errors_are_distinguished() {
        Python::initialize();
        Python::attach(|py| {
            assert!(to_py(Error::Invalid("x".into())).is_instance_of::<PyValueError>(py));
            let e = to_py(Error::NoSupport);
            assert!(e.is_instance_of::<NumericalError>(py));
            assert!(e.is_instance_of::<PyRuntimeError>(py));
        });
    }
}

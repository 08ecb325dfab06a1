//! Subcommand pipelines. Each writes its artifacts into one output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector2};
use serde::Serialize;
use serde_json::json;

use restshape::dynamics::{simulate_with, DynamicsState, Simulator};
use restshape::elasticity::stress_field;
use restshape::equilibrium::solve_static;
use restshape::mesh::{load_mesh, rigid_align, vertex, write_medit, write_obj, write_tet, MeshFormat};
use restshape::metrics::{evaluate_all, MetricsReport};
use restshape::objective::ObjectiveSpec;
use restshape::optimizer::optimize_with;
use restshape::plastic::rest_shape;
use restshape::{ElementPrecomp, Error, PlasticField, TetMesh};

use crate::config::{ConfigError, FormatName, InitialState, ObjectiveConfig, RunConfig};

/// Exit status 2 for bad input or configuration, 3 for numerical failure.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. }
            | Error::Index { .. }
            | Error::DegenerateElement(_)
            | Error::NonManifoldFace(_)
            | Error::DimensionMismatch { .. }
            | Error::Invalid(_)
            | Error::Io(_) => Self::Usage(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.0)
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn context(what: impl std::fmt::Display) -> impl FnOnce(Error) -> Failure {
    move |e| match Failure::from(e) {
        Failure::Usage(m) => Failure::Usage(format!("{what}: {m}")),
        Failure::Numerical(m) => Failure::Numerical(format!("{what}: {m}")),
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))?;
    s.push('\n');
    write_file(path, &s)
}

fn mesh_format(path: &Path, explicit: Option<FormatName>) -> CmdResult<MeshFormat> {
    match explicit {
        Some(FormatName::Tet) => Ok(MeshFormat::TetAscii),
        Some(FormatName::Mesh) => Ok(MeshFormat::MeditMesh),
        None => MeshFormat::from_path(path)
            .ok_or_else(|| Failure::Usage(format!("{}: cannot infer mesh format (use .tet or .mesh)", path.display()))),
    }
}

/// Loads a mesh, orients its tets and rejects degenerate ones.
pub fn read_mesh(path: &Path, format: Option<FormatName>) -> CmdResult<TetMesh> {
    let fmt = mesh_format(path, format)?;
    let mesh = load_mesh(path, fmt).map_err(context(path.display()))?;
    let scale = mesh.bbox_diagonal();
    mesh.validate_and_orient(1e-12 * scale * scale * scale).map_err(context(path.display()))
}

fn read_field(path: &Path, mesh: &TetMesh) -> CmdResult<PlasticField> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let field = PlasticField::from_text(&text).map_err(context(path.display()))?;
    if field.len() != mesh.num_elements() {
        return Err(Failure::Usage(format!(
            "{}: field has {} elements, mesh has {}",
            path.display(),
            field.len(),
            mesh.num_elements()
        )));
    }
    Ok(field)
}

/// Resolved inputs shared by every command.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub mesh: TetMesh,
}

impl Run {
    pub fn new(cfg: RunConfig, out: PathBuf) -> CmdResult<Self> {
        let mesh = read_mesh(&cfg.mesh_path, cfg.format)?;
        fs::create_dir_all(&out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
        Ok(Self { cfg, out, mesh })
    }

    fn load(&self) -> CmdResult<(restshape::ExternalLoad, Vec<usize>)> {
        self.cfg.load.resolve(&self.mesh.flat_positions()).map_err(|m| Failure::Usage(format!("load: {m}")))
    }

    /// Field from `--plastic` or the config; identity when neither is set.
    fn optional_field(&self, plastic: Option<&Path>) -> CmdResult<Option<PlasticField>> {
        match plastic.or(self.cfg.plastic_path.as_deref()) {
            Some(p) => read_field(p, &self.mesh).map(Some),
            None => Ok(None),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_positions(&self, name: &str, x: &DVector<f64>) -> CmdResult {
        let m = self.mesh.with_positions(x)?;
        write_file(&self.path(name), &write_tet(&m))
    }
}

#[derive(Serialize)]
struct SolveReport {
    converged: bool,
    residual_inf_n: f64,
    tol_force_n: f64,
    iterations: usize,
    energy_j: f64,
    num_fixed: usize,
}

pub fn equilibrium(run: &Run, plastic: Option<&Path>) -> CmdResult {
    let (load, fixed) = run.load()?;
    let field = run
        .optional_field(plastic)?
        .unwrap_or_else(|| PlasticField::identity(run.mesh.num_elements()));
    let pre = ElementPrecomp::new(&run.mesh)?;
    let x0 = run.mesh.flat_positions();
    let sol = solve_static(&pre, &field, &run.cfg.material, &load, &x0, &run.cfg.solver)?;
    let stress = stress_field(&sol.x_static, &field, &pre, &run.cfg.material)?;
    run.write_positions("static.tet", &sol.x_static)?;
    write_file(&run.path("stress.csv"), &stress.to_csv())?;
    write_file(&run.path("solve_log.csv"), &sol.log_csv())?;
    write_json(
        &run.path("solve.json"),
        &SolveReport {
            converged: sol.converged,
            residual_inf_n: sol.residual_inf,
            tol_force_n: sol.tol_force,
            iterations: sol.iterations,
            energy_j: sol.energy,
            num_fixed: fixed.len(),
        },
    )?;
    if !sol.converged {
        return Err(Failure::Numerical(format!(
            "equilibrium not converged: residual {:e} N above {:e} N after {} iterations",
            sol.residual_inf, sol.tol_force, sol.iterations
        )));
    }
    log::info!("equilibrium converged in {} iterations, residual {:e} N", sol.iterations, sol.residual_inf);
    Ok(())
}

fn objective_spec(run: &Run) -> CmdResult<ObjectiveSpec> {
    let obj = run
        .cfg
        .objective
        .as_ref()
        .ok_or_else(|| Failure::Usage("optimize needs an `objective` block".into()))?;
    Ok(match obj {
        ObjectiveConfig::Match { target_path, reg_weight, reg_relative } => {
            let target = match target_path {
                Some(p) => {
                    let t = read_mesh(p, None)?;
                    if t.num_vertices() != run.mesh.num_vertices() {
                        return Err(Failure::Usage(format!(
                            "{}: target has {} vertices, mesh has {}",
                            p.display(),
                            t.num_vertices(),
                            run.mesh.num_vertices()
                        )));
                    }
                    t.flat_positions()
                }
                None => run.mesh.flat_positions(),
            };
            ObjectiveSpec::matching(target).with_reg(*reg_weight, *reg_relative)
        }
        ObjectiveConfig::Stand { c_hat_m, contact_tol_m, reg_weight, reg_relative } => {
            let mut spec = ObjectiveSpec::standing(c_hat_m.map(Vector2::from)).with_reg(*reg_weight, *reg_relative);
            spec.contact_tol = *contact_tol_m;
            spec
        }
    })
}

pub fn optimize(run: &Run) -> CmdResult {
    let (load, _) = run.load()?;
    let spec = objective_spec(run)?;
    let every = run.cfg.checkpoint_every.filter(|&k| k > 0);
    let checkpoint = run.path("checkpoint.json");
    let result = optimize_with(
        &run.mesh,
        &run.cfg.material,
        &load,
        &spec,
        &run.cfg.optimizer,
        &run.cfg.solver,
        |iter, field| {
            if every.is_some_and(|k| iter % k == 0) {
                let doc = json!({ "iter": iter, "num_elements": field.len(), "coeffs": field.coeffs() });
                if let Err(e) = write_json(&checkpoint, &doc) {
                    log::warn!("checkpoint not written: {}", e.message());
                }
            }
        },
    )?;
    let pre = ElementPrecomp::new(&run.mesh)?;
    let rest = rest_shape(&result.field, &run.mesh.flat_positions(), &run.cfg.material, &pre)?;
    write_file(&run.path("plastic.txt"), &result.field.to_text())?;
    run.write_positions("rest.tet", &rest.x_static)?;
    run.write_positions("static_opt.tet", &result.solution.x_static)?;
    write_file(&run.path("trace.csv"), &result.trace.to_csv())?;
    let ratio = if result.initial_loss > 0.0 { result.final_loss / result.initial_loss } else { 0.0 };
    let report = json!({
        "config": &run.cfg,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "loss_ratio": ratio,
        "final_objective": result.trace.best_objective(),
        "reg_weight": result.objective.reg_weight,
        "iterations": result.trace.records.len(),
        "stop": result.stop,
        "static_residual_n": result.solution.residual_inf,
        "static_converged": result.solution.converged,
    });
    write_json(&run.path("report.json"), &report)?;
    log::info!(
        "optimize stopped ({:?}) after {} records, loss {:e} -> {:e}",
        result.stop,
        result.trace.records.len(),
        result.initial_loss,
        result.final_loss
    );
    Ok(())
}

pub struct MetricsOptions<'a> {
    pub plastic: Option<&'a Path>,
    pub pair: Option<&'a Path>,
    pub require_converged: bool,
    pub volume_weighted: bool,
}

pub fn metrics(run: &Run, opts: &MetricsOptions) -> CmdResult<MetricsReport> {
    let (load, _) = run.load()?;
    let field = run.optional_field(opts.plastic)?;
    let target = opts.pair.map(|p| read_mesh(p, None)).transpose()?;
    let target_x = target.as_ref().map(|t| t.flat_positions());
    let mut cfg = run.cfg.metrics.clone();
    cfg.volume_weighted |= opts.volume_weighted;
    let report = evaluate_all(
        &run.mesh,
        field.as_ref(),
        &run.cfg.material,
        &load,
        target.as_ref().zip(target_x.as_ref()),
        &cfg,
        &run.cfg.solver,
    );
    write_json(&run.path("metrics.json"), &report)?;
    write_file(&run.path("fracture.csv"), &report.fracture_csv())?;
    if opts.require_converged {
        if let Some(e) = &report.error {
            return Err(Failure::Numerical(format!("metrics: {e}")));
        }
        if report.solver.is_some_and(|s| !s.converged) {
            return Err(Failure::Numerical("metrics: equilibrium not converged".into()));
        }
    }
    if let Some(e) = &report.error {
        log::warn!("metrics incomplete: {e}");
    }
    Ok(report)
}

/// Aggregate of per-object mean stresses: the mean of the means and the mean
/// pooled over all elements (volume-pooled when `volume_weighted`).
pub fn batch_summary(names: &[String], reports: &[MetricsReport], volume_weighted: bool) -> serde_json::Value {
    let with_stress: Vec<(&String, &MetricsReport, f64)> = names
        .iter()
        .zip(reports)
        .filter_map(|(n, r)| r.mean_stress_pa.map(|m| (n, r, m)))
        .collect();
    let k = with_stress.len();
    let mean_of_means = (k > 0).then(|| with_stress.iter().map(|t| t.2).sum::<f64>() / k as f64);
    let weight = |r: &MetricsReport| if volume_weighted { r.volume_m3 } else { r.num_elements as f64 };
    let total: f64 = with_stress.iter().map(|t| weight(t.1)).sum();
    let pooled = (total > 0.0).then(|| with_stress.iter().map(|t| t.2 * weight(t.1)).sum::<f64>() / total);
    let objects: Vec<_> = names
        .iter()
        .zip(reports)
        .map(|(n, r)| json!({ "name": n, "mean_stress_pa": r.mean_stress_pa, "standable": r.standable, "cc": r.cc }))
        .collect();
    json!({
        "objects": objects,
        "mean_stress_per_object_pa": mean_of_means,
        "mean_stress_pooled_pa": pooled,
        "volume_weighted": volume_weighted,
    })
}

#[derive(Serialize)]
struct SimulateReport {
    steps: usize,
    frames: usize,
    final_time_s: f64,
    max_step_drift_m: f64,
    max_penetration_m: f64,
    final_kinetic_j: f64,
}

pub fn simulate(run: &Run, plastic: Option<&Path>) -> CmdResult {
    let dyn_run = run
        .cfg
        .dynamics
        .as_ref()
        .ok_or_else(|| Failure::Usage("simulate needs a `dynamics` block".into()))?;
    let (load, fixed) = run.load()?;
    let field_path = plastic
        .map(Path::to_path_buf)
        .or_else(|| run.cfg.plastic_path.clone())
        .unwrap_or_else(|| run.path("plastic.txt"));
    let field = if field_path.exists() {
        read_field(&field_path, &run.mesh)?
    } else {
        log::warn!("{} not found; simulating with the identity plastic field", field_path.display());
        PlasticField::identity(run.mesh.num_elements())
    };
    if !load.attachments.is_empty() {
        log::warn!("load attachments are ignored by simulate; use dynamics.settings.attachments");
    }
    let x_init = run.mesh.flat_positions();
    let x0 = match dyn_run.initial {
        InitialState::Mesh => x_init.clone(),
        InitialState::Static => {
            let pre = ElementPrecomp::new(&run.mesh)?;
            let sol = solve_static(&pre, &field, &run.cfg.material, &load, &x_init, &run.cfg.solver)?;
            if !sol.converged {
                return Err(Failure::Numerical(format!(
                    "initial equilibrium not converged (residual {:e} N)",
                    sol.residual_inf
                )));
            }
            sol.x_static
        }
        InitialState::Rest => {
            let pre = ElementPrecomp::new(&run.mesh)?;
            let rest = rest_shape(&field, &x_init, &run.cfg.material, &pre)?;
            let mut x = if fixed.is_empty() { rest.x_static } else { rigid_align(&rest.x_static, &x_init, &fixed) };
            for &v in &fixed {
                x.fixed_rows_mut::<3>(3 * v).copy_from(&vertex(&x_init, v));
            }
            x
        }
    };

    let mut settings = dyn_run.settings.clone();
    settings.gravity = run.cfg.load.gravity_m_s2;
    settings.fixed.extend(&fixed);
    settings.fixed.sort_unstable();
    settings.fixed.dedup();
    let sim = Simulator::new(&run.mesh, field, run.cfg.material, settings)?;
    let faces = run.mesh.boundary_surface()?;
    let mut frames = 0;
    let traj = simulate_with(&sim, DynamicsState::at_rest(x0), dyn_run.duration_s, dyn_run.frame_stride, |i, s| {
        let m = run.mesh.with_positions(&s.x)?;
        fs::write(run.path(&format!("frame_{i:06}.obj")), write_obj(&m, &faces))?;
        frames += 1;
        Ok(())
    })?;
    write_file(&run.path("trajectory.csv"), &traj.to_csv())?;

    let max_drift = traj
        .states
        .windows(2)
        .map(|w| {
            (0..w[0].x.len() / 3)
                .map(|i| (vertex(&w[1].x, i) - vertex(&w[0].x, i)).norm())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    log::info!("max per-step drift {max_drift:e} m over {} steps", traj.states.len() - 1);
    let last = traj.summary.last().expect("trajectory has the initial state");
    write_json(
        &run.path("simulate.json"),
        &SimulateReport {
            steps: traj.states.len() - 1,
            frames,
            final_time_s: last.t,
            max_step_drift_m: max_drift,
            max_penetration_m: traj.summary.iter().map(|s| s.max_penetration).fold(0.0, f64::max),
            final_kinetic_j: last.kinetic_j,
        },
    )
}

/// `.tet` ↔ `.mesh`, or the boundary surface as `.obj`.
pub fn convert(input: &Path, output: &Path) -> CmdResult {
    let mesh = read_mesh(input, None)?;
    let text = match output.extension().and_then(|e| e.to_str()) {
        Some("tet") => write_tet(&mesh),
        Some("mesh") => write_medit(&mesh),
        Some("obj") => write_obj(&mesh, &mesh.boundary_surface()?),
        _ => {
            return Err(Failure::Usage(format!(
                "{}: output must end in .tet, .mesh or .obj",
                output.display()
            )))
        }
    };
    write_file(output, &text)
}

/// Short listing of a mesh for log output.
pub fn describe(mesh: &TetMesh) -> String {
    let mut s = String::new();
    let _ = write!(s, "{} vertices, {} tets, bbox diagonal {:.4e} m", mesh.num_vertices(), mesh.num_elements(), mesh.bbox_diagonal());
    s
}

//! First-order descent over the plastic field, re-solving equilibrium at
//! every trial point and projecting eigenvalues after every update.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adjoint::{objective_gradient, GradientResult};
use crate::elasticity::{ElementPrecomp, MaterialParams};
use crate::equilibrium::{solve_static, EquilibriumSolution, ExternalLoad, SolverConfig};
use crate::error::{Error, Result};
use crate::mesh::TetMesh;
use crate::objective::{Objective, ObjectiveSpec};
use crate::plastic::{PlasticField, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GradientDescent,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub method: Method,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop when `‖∇J‖_∞` falls to this value.
    pub grad_tol: f64,
    /// Stop when the objective drops by less than this fraction over `plateau_window` iterations.
    pub obj_rel_tol: f64,
    pub plateau_window: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub backtrack_on_failure: bool,
    pub max_backtracks: usize,
    /// Inner equilibrium tolerance as a fraction of the solver's force
    /// tolerance. Objective changes near convergence are smaller than the
    /// error a solve at the plain tolerance leaves in `x`.
    pub solve_tol_scale: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            method: Method::GradientDescent,
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 1000,
            grad_tol: 1e-12,
            obj_rel_tol: 1e-8,
            plateau_window: 10,
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            backtrack_on_failure: true,
            max_backtracks: 20,
            solve_tol_scale: 1e-3,
        }
    }
}

impl OptimizeConfig {
    pub fn adam(step_size: f64) -> Self {
        Self {
            method: Method::Adam,
            step_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Invalid(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.max_iters == 0 {
            return Err(Error::Invalid("optimizer max_iters must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.solve_tol_scale > 0.0 && self.solve_tol_scale <= 1.0) {
            return Err(Error::Invalid(format!("solve_tol_scale must lie in (0, 1], got {}", self.solve_tol_scale)));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= 1.0 && self.sigma_max >= 1.0) {
            return Err(Error::Invalid(format!(
                "sigma bounds must satisfy 0 < min ≤ 1 ≤ max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }
}

/// Moment estimates for Adam; unused by gradient descent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepState {
    pub t: usize,
    pub m: DVector<f64>,
    pub v: DVector<f64>,
}

/// The raw parameter update for one gradient.
pub fn step_update(grad: &DVector<f64>, state: &mut StepState, cfg: &OptimizeConfig) -> Result<DVector<f64>> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    match cfg.method {
        Method::GradientDescent => Ok(-cfg.step_size * grad),
        Method::Adam => {
            if state.m.len() != grad.len() {
                state.m = DVector::zeros(grad.len());
                state.v = DVector::zeros(grad.len());
                state.t = 0;
            }
            state.t += 1;
            state.m = cfg.beta1 * &state.m + (1.0 - cfg.beta1) * grad;
            state.v = cfg.beta2 * &state.v + (1.0 - cfg.beta2) * grad.component_mul(grad);
            let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
            let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
            Ok(DVector::from_fn(grad.len(), |i, _| {
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                -cfg.step_size * m_hat / (v_hat.sqrt() + cfg.epsilon)
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub loss: f64,
    pub reg: f64,
    pub grad_inf: f64,
    pub newton_iters: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OptimizeTrace {
    pub records: Vec<TraceRecord>,
}

impl OptimizeTrace {
    /// `iter,objective,loss,reg,grad_inf,newton_iters,accepted`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,objective,loss,reg,grad_inf,newton_iters,accepted\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                r.iter, r.objective, r.loss, r.reg, r.grad_inf, r.newton_iters, r.accepted as u8
            );
        }
        s
    }

    /// Best objective among accepted iterations.
    pub fn best_objective(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.objective)
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    Plateau,
    MaxIterations,
    /// No backtracked step lowered the objective although every trial solved.
    NoDescent,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    /// Best field seen.
    pub field: PlasticField,
    pub trace: OptimizeTrace,
    /// Equilibrium of `field`.
    pub solution: EquilibriumSolution,
    pub objective: Objective,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stop: StopReason,
}

fn grad_inf(g: &GradientResult) -> f64 {
    g.gradient.amax()
}

/// Optimizes the plastic field of `mesh` (the initial geometry) from the
/// identity. `on_accept` runs after every accepted iteration.
pub fn optimize_with(
    mesh: &TetMesh,
    mat: &MaterialParams,
    load: &ExternalLoad,
    spec: &ObjectiveSpec,
    cfg: &OptimizeConfig,
    solver: &SolverConfig,
    mut on_accept: impl FnMut(usize, &PlasticField),
) -> Result<OptimizeResult> {
    cfg.validate()?;
    mat.validate()?;
    let pre = ElementPrecomp::new(mesh)?;
    // never tighten below the roundoff floor of the force assembly
    let tol = solver.resolved_tol(mat, &pre);
    let floor = 1e-10 * mat.mu() * pre.total_volume().powf(2.0 / 3.0);
    let solver = &SolverConfig {
        tol_force: Some((tol * cfg.solve_tol_scale).max(floor.min(tol))),
        ..*solver
    };
    let x_init = mesh.flat_positions();
    let mut field = PlasticField::identity(mesh.num_elements());

    let mut sol = match solve_static(&pre, &field, mat, load, &x_init, solver) {
        Ok(s) if s.converged => s,
        Ok(s) => {
            return Err(Error::InfeasibleStart(format!(
                "initial equilibrium residual {:e} above {:e}",
                s.residual_inf, s.tol_force
            )))
        }
        Err(e) => return Err(Error::InfeasibleStart(e.to_string())),
    };
    let objective = Objective::resolve(spec, mesh, &sol.x_static, &field, &pre, mat)?;
    let mut grad = objective_gradient(&objective, mesh, &pre, mat, load, &field, &sol)?;
    let initial_loss = grad.value.loss;

    let mut trace = OptimizeTrace::default();
    trace.records.push(TraceRecord {
        iter: 0,
        objective: grad.value.total,
        loss: grad.value.loss,
        reg: grad.value.reg,
        grad_inf: grad_inf(&grad),
        newton_iters: sol.iterations,
        accepted: true,
    });
    on_accept(0, &field);

    let mut best = (field.clone(), sol.clone(), grad.value.total, grad.value.loss);
    let mut history = vec![grad.value.total];
    let mut state = StepState::default();
    let mut stop = StopReason::MaxIterations;

    for iter in 1..=cfg.max_iters {
        if grad_inf(&grad) <= cfg.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        if history.len() > cfg.plateau_window {
            let old = history[history.len() - 1 - cfg.plateau_window];
            let now = *history.last().unwrap();
            if old - now <= cfg.obj_rel_tol * old.abs() {
                stop = StopReason::Plateau;
                break;
            }
        }
        let delta = step_update(&grad.gradient, &mut state, cfg)?;
        let p = field.to_vector();
        let current = grad.value.total;

        let mut scale = 1.0;
        let mut accepted = None;
        let mut solver_failed_every_time = true;
        let attempts = if cfg.backtrack_on_failure { cfg.max_backtracks + 1 } else { 1 };
        for attempt in 0..attempts {
            let trial = PlasticField::from_vector(&(&p + scale * &delta))?.project_eigenvalues(cfg.sigma_min, cfg.sigma_max)?;
            match solve_static(&pre, &trial, mat, load, &sol.x_static, solver) {
                Ok(s) if s.converged => {
                    solver_failed_every_time = false;
                    let value = objective.evaluate(mesh, &s.x_static, &trial, &pre, mat)?;
                    if !cfg.backtrack_on_failure || value.total <= current {
                        accepted = Some((trial, s));
                        break;
                    }
                    log::debug!("iteration {iter}: objective rose to {:e} (attempt {attempt})", value.total);
                }
                Ok(s) => log::debug!("iteration {iter}: equilibrium stalled at residual {:e}", s.residual_inf),
                Err(e) => log::debug!("iteration {iter}: equilibrium failed: {e}"),
            }
            scale *= 0.5;
        }

        let Some((trial, s)) = accepted else {
            if solver_failed_every_time {
                return Err(Error::OptimizerStalled(iter));
            }
            trace.records.push(TraceRecord {
                iter,
                objective: current,
                loss: grad.value.loss,
                reg: grad.value.reg,
                grad_inf: grad_inf(&grad),
                newton_iters: 0,
                accepted: false,
            });
            stop = StopReason::NoDescent;
            break;
        };
        field = trial;
        sol = s;
        grad = objective_gradient(&objective, mesh, &pre, mat, load, &field, &sol)?;
        trace.records.push(TraceRecord {
            iter,
            objective: grad.value.total,
            loss: grad.value.loss,
            reg: grad.value.reg,
            grad_inf: grad_inf(&grad),
            newton_iters: sol.iterations,
            accepted: true,
        });
        history.push(grad.value.total);
        if grad.value.total < best.2 {
            best = (field.clone(), sol.clone(), grad.value.total, grad.value.loss);
        }
        on_accept(iter, &field);
        log::info!(
            "iter {iter}: objective {:.6e} loss {:.6e} |g| {:.3e}",
            grad.value.total,
            grad.value.loss,
            grad_inf(&grad)
        );
    }

    let (field, solution, _, final_loss) = best;
    Ok(OptimizeResult {
        field,
        trace,
        solution,
        objective,
        initial_loss,
        final_loss,
        stop,
    })
}

pub fn optimize(
    mesh: &TetMesh,
    mat: &MaterialParams,
    load: &ExternalLoad,
    spec: &ObjectiveSpec,
    cfg: &OptimizeConfig,
    solver: &SolverConfig,
) -> Result<OptimizeResult> {
    optimize_with(mesh, mat, load, spec, cfg, solver, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::box_mesh;
    use nalgebra::Vector3;

    #[test]
    fn gradient_descent_step() {
        let mut st = StepState::default();
        let cfg = OptimizeConfig::default();
        let g = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert_eq!(step_update(&g, &mut st, &cfg).unwrap(), DVector::from_vec(vec![0.0, -1e-2, 0.0]));
        assert_eq!(step_update(&DVector::zeros(3), &mut st, &cfg).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let mut st = StepState::default();
        let cfg = OptimizeConfig::adam(0.1);
        let g = DVector::from_vec(vec![3.0, -1e-3, 0.0]);
        let d = step_update(&g, &mut st, &cfg).unwrap();
        assert!((d[0] + 0.1).abs() < 1e-8);
        assert!((d[1] - 0.1).abs() < 1e-5);
        assert_eq!(d[2], 0.0);
        let mut fresh = StepState::default();
        assert_eq!(step_update(&DVector::zeros(2), &mut fresh, &cfg).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let g = DVector::from_vec(vec![f64::NAN]);
        let r = step_update(&g, &mut StepState::default(), &OptimizeConfig::default());
        assert!(matches!(r, Err(Error::NonFiniteGradient)));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizeConfig::default().validate().is_ok());
        assert!(OptimizeConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizeConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        assert!(OptimizeConfig { sigma_min: 2.0, ..Default::default() }.validate().is_err());
    }

    fn small_beam() -> (TetMesh, ExternalLoad) {
        let mesh = box_mesh([3, 1, 1], Vector3::new(0.03, 0.02, 0.02), Vector3::zeros());
        let x = mesh.flat_positions();
        let left: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| x[3 * v] < 1e-9).collect();
        (mesh, ExternalLoad::default().fix_at(&left, &x))
    }

    #[test]
    fn already_optimal_target_stops_immediately() {
        let (mesh, load) = small_beam();
        let mat = MaterialParams::default();
        let pre = ElementPrecomp::new(&mesh).unwrap();
        let solver = SolverConfig { tol_force: Some(1e-12), ..Default::default() };
        let sol = solve_static(&pre, &PlasticField::identity(mesh.num_elements()), &mat, &load, &mesh.flat_positions(), &solver).unwrap();
        let spec = ObjectiveSpec::matching(sol.x_static.clone());
        let res = optimize(&mesh, &mat, &load, &spec, &OptimizeConfig::default(), &solver).unwrap();
        assert!(res.trace.records.len() <= 2);
        assert!(res.trace.records[0].grad_inf < 1e-12);
        assert!(res.final_loss < 1e-20);
    }

    #[test]
    fn matching_reduces_sag_and_trace_is_monotone() {
        let (mesh, load) = small_beam();
        let mat = MaterialParams::default();
        let spec = ObjectiveSpec::matching(mesh.flat_positions()).with_reg(1e-4, true);
        let cfg = OptimizeConfig { max_iters: 60, ..OptimizeConfig::adam(2e-3) };
        let mut seen = 0;
        let res = optimize_with(&mesh, &mat, &load, &spec, &cfg, &SolverConfig::default(), |_, f| {
            seen += 1;
            for t in 0..f.len() {
                let e = f.matrix(t).symmetric_eigen().eigenvalues;
                assert!(e.min() >= cfg.sigma_min - 1e-12 && e.max() <= cfg.sigma_max + 1e-12);
            }
        })
        .unwrap();
        assert!(res.final_loss < 0.5 * res.initial_loss, "{} vs {}", res.final_loss, res.initial_loss);
        let acc: Vec<f64> = res.trace.records.iter().filter(|r| r.accepted).map(|r| r.objective).collect();
        assert_eq!(seen, acc.len());
        assert!(acc.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.trace.records.len() <= cfg.max_iters + 1);
        assert!(res.trace.to_csv().starts_with("iter,objective,loss,reg,grad_inf,newton_iters,accepted\n"));
    }

    #[test]
    fn unsupported_start_is_infeasible() {
        let (mesh, _) = small_beam();
        let spec = ObjectiveSpec::matching(mesh.flat_positions());
        let r = optimize(&mesh, &MaterialParams::default(), &ExternalLoad::default(), &spec, &OptimizeConfig::default(), &SolverConfig::default());
        assert!(matches!(r, Err(Error::InfeasibleStart(_))));
    }

    #[test]
    fn runs_are_deterministic() {
        let (mesh, load) = small_beam();
        let spec = ObjectiveSpec::matching(mesh.flat_positions());
        let cfg = OptimizeConfig { max_iters: 5, ..OptimizeConfig::adam(1e-3) };
        let a = optimize(&mesh, &MaterialParams::default(), &load, &spec, &cfg, &SolverConfig::default()).unwrap();
        let b = optimize(&mesh, &MaterialParams::default(), &load, &spec, &cfg, &SolverConfig::default()).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert_eq!(a.field, b.field);
    }
}

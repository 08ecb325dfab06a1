//! Implicit backward-Euler simulation with Rayleigh damping, attachment
//! springs following keyframed targets, and a penalty ground plane with
//! smoothed Coulomb friction.
//!
//! Each step minimizes the incremental potential
//! `‖x − x̂‖²_M / 2dt² + ‖x − xⁿ‖²_D / 2dt + E(x) − gᵀMx + springs + contact − f_frᵀx`
//! with `x̂ = xⁿ + dt vⁿ`, whose gradient is the backward-Euler residual.

use std::fmt::Write as _;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::elasticity::{elastic_energy, internal_forces, mass_matrix, stiffness_matrix, ElementPrecomp, MaterialParams};
use crate::equilibrium::{factor_with_shift, STANDARD_GRAVITY};
use crate::error::{Error, Result};
use crate::mesh::{vertex, TetMesh};
use crate::plastic::PlasticField;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsState {
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub t: f64,
}

impl DynamicsState {
    pub fn at_rest(x: DVector<f64>) -> Self {
        let n = x.len();
        Self { x, v: DVector::zeros(n), t: 0.0 }
    }
}

/// Piecewise-linear target path for one attached vertex. Held constant
/// outside the keyframe range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentTrack {
    pub vertex: usize,
    /// `(time, target)` pairs in increasing time.
    pub keys: Vec<(f64, [f64; 3])>,
}

impl AttachmentTrack {
    /// Track holding `vertex` at a fixed target.
    pub fn fixed(vertex: usize, target: Vector3<f64>) -> Self {
        Self { vertex, keys: vec![(0.0, target.into())] }
    }

    pub fn target(&self, t: f64) -> Vector3<f64> {
        let keys = &self.keys;
        if t <= keys[0].0 {
            return keys[0].1.into();
        }
        for w in keys.windows(2) {
            let ((t0, a), (t1, b)) = (w[0], w[1]);
            if t <= t1 {
                let s = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                return Vector3::from(a) * (1.0 - s) + Vector3::from(b) * s;
            }
        }
        keys[keys.len() - 1].1.into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub dt: f64,
    pub rayleigh_alpha: f64,
    pub rayleigh_beta: f64,
    pub gravity: [f64; 3],
    pub ground_z: f64,
    /// 0 disables ground contact.
    pub k_contact: f64,
    pub k_attach: f64,
    pub friction_mu: f64,
    pub friction_eps: f64,
    pub newton_max_iters: usize,
    /// Residual tolerance (N); `None` = `1e-6 μ V^{2/3}`.
    pub newton_tol: Option<f64>,
    pub max_halvings: usize,
    pub attachments: Vec<AttachmentTrack>,
    /// Vertices held at their initial positions.
    pub fixed: Vec<usize>,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 120.0,
            rayleigh_alpha: 0.01,
            rayleigh_beta: 0.001,
            gravity: [0.0, 0.0, -STANDARD_GRAVITY],
            ground_z: 0.0,
            k_contact: 1e4,
            k_attach: 1e3,
            friction_mu: 0.0,
            friction_eps: 1e-3,
            newton_max_iters: 50,
            newton_tol: None,
            max_halvings: 4,
            attachments: Vec::new(),
            fixed: Vec::new(),
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self, num_vertices: usize) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Invalid(format!("dt must be > 0, got {}", self.dt)));
        }
        for (name, v) in [
            ("k_contact", self.k_contact),
            ("k_attach", self.k_attach),
            ("friction_mu", self.friction_mu),
            ("rayleigh_alpha", self.rayleigh_alpha),
            ("rayleigh_beta", self.rayleigh_beta),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if !(self.friction_eps > 0.0) {
            return Err(Error::Invalid("friction_eps must be > 0".into()));
        }
        if self.newton_max_iters == 0 {
            return Err(Error::Invalid("newton_max_iters must be ≥ 1".into()));
        }
        for a in &self.attachments {
            if a.vertex >= num_vertices {
                return Err(Error::Invalid(format!("attachment vertex {} out of range", a.vertex)));
            }
            if a.keys.is_empty() || a.keys.windows(2).any(|w| w[1].0 < w[0].0) {
                return Err(Error::Invalid(format!("attachment track for vertex {} needs sorted keys", a.vertex)));
            }
        }
        if let Some(&v) = self.fixed.iter().find(|&&v| v >= num_vertices) {
            return Err(Error::Invalid(format!("fixed vertex {v} out of range")));
        }
        Ok(())
    }
}

/// Energies of one state, in joules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub kinetic: f64,
    pub elastic: f64,
    pub gravitational: f64,
    pub contact: f64,
}

impl EnergyReport {
    pub fn total(&self) -> f64 {
        self.kinetic + self.elastic + self.gravitational + self.contact
    }
}

/// Precomputed quantities shared by all steps of one simulation.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub pre: ElementPrecomp,
    pub field: PlasticField,
    pub mat: MaterialParams,
    pub cfg: DynamicsConfig,
    pub mass: DVector<f64>,
    free: Vec<usize>,
    tol: f64,
}

/// Terms of the incremental potential that stay fixed within one step.
struct StepFrame<'a> {
    prev: &'a DynamicsState,
    x_hat: DVector<f64>,
    damping: CsrMatrix,
    dt: f64,
    t_next: f64,
    friction: DVector<f64>,
}

impl Simulator {
    pub fn new(mesh: &TetMesh, field: PlasticField, mat: MaterialParams, cfg: DynamicsConfig) -> Result<Self> {
        cfg.validate(mesh.num_vertices())?;
        mat.validate()?;
        let pre = ElementPrecomp::new(mesh)?;
        if field.len() != pre.num_elements() {
            return Err(Error::DimensionMismatch { expected: pre.num_elements(), got: field.len() });
        }
        let mass = mass_matrix(&field, &pre, &mat)?;
        let fixed: std::collections::BTreeSet<usize> = cfg.fixed.iter().copied().collect();
        let free = (0..pre.num_vertices)
            .filter(|v| !fixed.contains(v))
            .flat_map(|v| [3 * v, 3 * v + 1, 3 * v + 2])
            .collect();
        let tol = cfg
            .newton_tol
            .unwrap_or_else(|| 1e-6 * mat.mu() * pre.total_volume().powf(2.0 / 3.0));
        Ok(Self { pre, field, mat, cfg, mass, free, tol })
    }

    fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.cfg.gravity)
    }

    pub fn energies(&self, state: &DynamicsState) -> Result<EnergyReport> {
        let g = self.gravity();
        let x = &state.x;
        let kinetic = 0.5 * state.v.component_mul(&state.v).dot(&self.mass);
        let mut grav = 0.0;
        let mut contact = 0.0;
        for i in 0..self.pre.num_vertices {
            grav -= self.mass[3 * i] * g.dot(&vertex(x, i));
            let d = self.penetration(x[3 * i + 2]);
            contact += 0.5 * self.cfg.k_contact * d * d;
        }
        Ok(EnergyReport {
            kinetic,
            elastic: elastic_energy(x, &self.field, &self.pre, &self.mat)?,
            gravitational: grav,
            contact,
        })
    }

    fn penetration(&self, z: f64) -> f64 {
        if self.cfg.k_contact > 0.0 {
            (self.cfg.ground_z - z).max(0.0)
        } else {
            0.0
        }
    }

    /// Lagged friction forces from the contact state at the start of the step.
    fn friction_forces(&self, s: &DynamicsState) -> DVector<f64> {
        let mut f = DVector::zeros(s.x.len());
        if self.cfg.friction_mu == 0.0 {
            return f;
        }
        for i in 0..self.pre.num_vertices {
            let fn_ = self.cfg.k_contact * self.penetration(s.x[3 * i + 2]);
            if fn_ == 0.0 {
                continue;
            }
            let vt = nalgebra::Vector2::new(s.v[3 * i], s.v[3 * i + 1]);
            let scale = -self.cfg.friction_mu * fn_ / (vt.norm_squared() + self.cfg.friction_eps.powi(2)).sqrt();
            f[3 * i] = scale * vt.x;
            f[3 * i + 1] = scale * vt.y;
        }
        f
    }

    fn frame<'a>(&self, prev: &'a DynamicsState, dt: f64) -> Result<StepFrame<'a>> {
        let damping = if self.cfg.rayleigh_beta > 0.0 {
            let k = stiffness_matrix(&prev.x, &self.field, &self.pre, &self.mat, true)?;
            let mut d = k;
            d.scale(self.cfg.rayleigh_beta);
            d.add_diagonal(&(self.cfg.rayleigh_alpha * &self.mass))
        } else {
            CsrMatrix::zeros(prev.x.len(), prev.x.len()).add_diagonal(&(self.cfg.rayleigh_alpha * &self.mass))
        };
        Ok(StepFrame {
            prev,
            x_hat: &prev.x + dt * &prev.v,
            damping,
            dt,
            t_next: prev.t + dt,
            friction: self.friction_forces(prev),
        })
    }

    fn potential(&self, x: &DVector<f64>, fr: &StepFrame) -> Result<f64> {
        let dt = fr.dt;
        let dx_hat = x - &fr.x_hat;
        let dx = x - &fr.prev.x;
        let mut j = 0.5 * dx_hat.component_mul(&dx_hat).dot(&self.mass) / (dt * dt);
        j += 0.5 * dx.dot(&fr.damping.mul_vec(&dx)) / dt;
        j += elastic_energy(x, &self.field, &self.pre, &self.mat)?;
        j -= fr.friction.dot(x);
        let g = self.gravity();
        for i in 0..self.pre.num_vertices {
            j -= self.mass[3 * i] * g.dot(&vertex(x, i));
            let d = self.penetration(x[3 * i + 2]);
            j += 0.5 * self.cfg.k_contact * d * d;
        }
        for a in &self.cfg.attachments {
            j += 0.5 * self.cfg.k_attach * (vertex(x, a.vertex) - a.target(fr.t_next)).norm_squared();
        }
        Ok(j)
    }

    fn gradient(&self, x: &DVector<f64>, fr: &StepFrame) -> Result<DVector<f64>> {
        let dt = fr.dt;
        let mut g = (x - &fr.x_hat).component_mul(&self.mass) / (dt * dt);
        g += fr.damping.mul_vec(&(x - &fr.prev.x)) / dt;
        g += internal_forces(x, &self.field, &self.pre, &self.mat)?;
        g -= &fr.friction;
        let grav = self.gravity();
        for i in 0..self.pre.num_vertices {
            for d in 0..3 {
                g[3 * i + d] -= self.mass[3 * i + d] * grav[d];
            }
            g[3 * i + 2] -= self.cfg.k_contact * self.penetration(x[3 * i + 2]);
        }
        for a in &self.cfg.attachments {
            let r = vertex(x, a.vertex) - a.target(fr.t_next);
            for d in 0..3 {
                g[3 * a.vertex + d] += self.cfg.k_attach * r[d];
            }
        }
        Ok(g)
    }

    fn hessian(&self, x: &DVector<f64>, fr: &StepFrame) -> Result<CsrMatrix> {
        let dt = fr.dt;
        let mut diag = &self.mass / (dt * dt);
        for i in 0..self.pre.num_vertices {
            if self.penetration(x[3 * i + 2]) > 0.0 {
                diag[3 * i + 2] += self.cfg.k_contact;
            }
        }
        for a in &self.cfg.attachments {
            for d in 0..3 {
                diag[3 * a.vertex + d] += self.cfg.k_attach;
            }
        }
        let k = stiffness_matrix(x, &self.field, &self.pre, &self.mat, true)?;
        let mut damp = fr.damping.clone();
        damp.scale(1.0 / dt);
        Ok(k.add(&damp).add_diagonal(&diag))
    }

    /// Incremental potential of `x` for a step of length `dt` from `state`.
    pub fn incremental_potential(&self, x: &DVector<f64>, state: &DynamicsState, dt: f64) -> Result<f64> {
        self.potential(x, &self.frame(state, dt)?)
    }

    /// Backward-Euler residual (gradient of the incremental potential).
    pub fn residual(&self, x: &DVector<f64>, state: &DynamicsState, dt: f64) -> Result<DVector<f64>> {
        self.gradient(x, &self.frame(state, dt)?)
    }

    /// One backward-Euler step of length `dt`.
    pub fn step_dt(&self, state: &DynamicsState, dt: f64) -> Result<DynamicsState> {
        let fr = self.frame(state, dt)?;
        let free = &self.free;
        let mut x = state.x.clone();
        let mut j = self.potential(&x, &fr)?;
        let mut g = self.gradient(&x, &fr)?;
        let res = |g: &DVector<f64>| free.iter().fold(0.0f64, |m, &i| m.max(g[i].abs()));
        let mut r = res(&g);
        let mut iter = 0;
        while r > self.tol {
            if iter == self.cfg.newton_max_iters {
                return Err(Error::StepDiverged(r));
            }
            iter += 1;
            let h = self.hessian(&x, &fr)?.submatrix(free, free);
            let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            let (fac, _) = factor_with_shift(&h, 0.0)?;
            let dir = -fac.solve(&g_f);
            let slope = g_f.dot(&dir);
            if !(slope < 0.0) {
                return Err(Error::StepDiverged(r));
            }
            let mut alpha = 1.0;
            loop {
                let mut trial = x.clone();
                for (k, &i) in free.iter().enumerate() {
                    trial[i] += alpha * dir[k];
                }
                let j_trial = self.potential(&trial, &fr)?;
                let armijo = j_trial <= j + 1e-4 * alpha * slope;
                let flat = (j_trial - j).abs() <= 1e-13 * j.abs().max(f64::MIN_POSITIVE);
                if armijo || flat {
                    let g_trial = self.gradient(&trial, &fr)?;
                    let r_trial = res(&g_trial);
                    if armijo || r_trial < r {
                        x = trial;
                        j = j_trial;
                        g = g_trial;
                        r = r_trial;
                        break;
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-10 {
                    return Err(Error::StepDiverged(r));
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepDiverged(f64::NAN));
        }
        let v = (&x - &state.x) / dt;
        Ok(DynamicsState { x, v, t: fr.t_next })
    }

    /// One step of the configured `dt`, halving it (with the matching number
    /// of sub-steps) up to `max_halvings` times on failure.
    pub fn step(&self, state: &DynamicsState) -> Result<DynamicsState> {
        let mut last = 0.0;
        for h in 0..=self.cfg.max_halvings {
            let n = 1usize << h;
            let dt = self.cfg.dt / n as f64;
            let mut s = state.clone();
            let mut ok = true;
            for _ in 0..n {
                match self.step_dt(&s, dt) {
                    Ok(next) => s = next,
                    Err(Error::StepDiverged(r)) => {
                        last = r;
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if ok {
                if h > 0 {
                    log::debug!("step at t = {} needed dt/{}", state.t, n);
                }
                s.t = state.t + self.cfg.dt;
                return Ok(s);
            }
        }
        log::warn!("step at t = {} failed with residual {last:e}", state.t);
        Err(Error::SimulationAborted(state.t))
    }

    pub fn summary(&self, step: usize, state: &DynamicsState) -> Result<StepSummary> {
        let e = self.energies(state)?;
        let n = self.pre.num_vertices;
        let min_z = (0..n).map(|i| state.x[3 * i + 2]).fold(f64::INFINITY, f64::min);
        let max_penetration = if self.cfg.k_contact > 0.0 { (self.cfg.ground_z - min_z).max(0.0) } else { 0.0 };
        Ok(StepSummary {
            step,
            t: state.t,
            kinetic_j: e.kinetic,
            elastic_j: e.elastic,
            min_z,
            max_penetration,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepSummary {
    pub step: usize,
    pub t: f64,
    pub kinetic_j: f64,
    pub elastic_j: f64,
    pub min_z: f64,
    pub max_penetration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DynamicsState>,
    pub summary: Vec<StepSummary>,
}

impl Trajectory {
    /// `step,t,kinetic_j,elastic_j,min_z,max_penetration`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,t,kinetic_j,elastic_j,min_z,max_penetration\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.step, r.t, r.kinetic_j, r.elastic_j, r.min_z, r.max_penetration
            );
        }
        s
    }
}

/// Runs `duration` seconds from `initial`. `on_frame(frame_index, state)` is
/// called after every `frame_stride`-th step and after the last one, so a
/// run of `n` steps emits `ceil(n / frame_stride)` frames.
pub fn simulate_with(
    sim: &Simulator,
    initial: DynamicsState,
    duration: f64,
    frame_stride: usize,
    mut on_frame: impl FnMut(usize, &DynamicsState) -> Result<()>,
) -> Result<Trajectory> {
    if !(duration > 0.0) {
        return Err(Error::Invalid(format!("duration must be > 0, got {duration}")));
    }
    if initial.x.len() != sim.pre.ndof() || initial.v.len() != sim.pre.ndof() {
        return Err(Error::DimensionMismatch { expected: sim.pre.ndof(), got: initial.x.len() });
    }
    let stride = frame_stride.max(1);
    let steps = (duration / sim.cfg.dt - 1e-9).ceil() as usize;
    let mut states = vec![initial];
    let mut summary = vec![sim.summary(0, &states[0])?];
    let mut frame = 0;
    for k in 1..=steps {
        let next = sim.step(&states[k - 1])?;
        summary.push(sim.summary(k, &next)?);
        if k % stride == 0 || k == steps {
            on_frame(frame, &next)?;
            frame += 1;
        }
        states.push(next);
    }
    Ok(Trajectory { states, summary })
}

pub fn simulate(sim: &Simulator, initial: DynamicsState, duration: f64) -> Result<Trajectory> {
    simulate_with(sim, initial, duration, 1, |_, _| Ok(()))
}

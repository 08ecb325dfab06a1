use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("tet {tet} references vertex {index} but the mesh has {count} vertices")]
    Index { tet: usize, index: usize, count: usize },

    #[error("tet {0} is degenerate (volume below threshold)")]
    DegenerateElement(usize),

    #[error("face {0:?} is shared by more than two tets")]
    NonManifoldFace([usize; 3]),

    #[error("total mass is zero")]
    ZeroMass,

    #[error("plastic strain of tet {0} has non-positive determinant")]
    SingularPlastic(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("free body under gravity has no static equilibrium; fix vertices or add attachments")]
    NoSupport,

    #[error("solver diverged: {0}")]
    SolverDiverged(String),

    #[error("linear solve failed: {0}")]
    LinearSolveFailure(String),

    #[error("equilibrium is not converged (residual {residual:e} > tolerance {tol:e})")]
    NotConverged { residual: f64, tol: f64 },

    #[error("support polygon is degenerate")]
    DegenerateSupport,

    #[error("silhouette is empty")]
    EmptySilhouette,

    #[error("initial equilibrium failed: {0}")]
    InfeasibleStart(String),

    #[error("optimizer stalled after {0} consecutive failed backtracks")]
    OptimizerStalled(usize),

    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("time step diverged at t = {0}")]
    StepDiverged(f64),

    #[error("simulation aborted at t = {0}")]
    SimulationAborted(f64),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

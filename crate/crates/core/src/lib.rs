//! Rest-shape optimization for tetrahedral elastic bodies.
//!
//! Given a target geometry, material parameters and external loads, find a
//! per-element plastic strain field whose static equilibrium under those
//! loads matches the target (or stands stably on the ground). Gradients come
//! from implicit differentiation of the equilibrium constraint.

pub mod adjoint;
pub mod dynamics;
pub mod elasticity;
pub mod equilibrium;
pub mod error;
pub mod mesh;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod plastic;
pub mod sparse;

pub use elasticity::{ElementPrecomp, MaterialParams, StressField};
pub use equilibrium::{Attachment, EquilibriumSolution, ExternalLoad, SolverConfig};
pub use error::{Error, Result};
pub use mesh::TetMesh;
pub use plastic::PlasticField;

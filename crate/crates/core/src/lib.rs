//! Solver and verification suite for semilinear wave equations with dynamic
//! (Wentzell) boundary conditions on time-dependent interval and cylinder
//! geometries.

pub mod assembly;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evolution;
pub mod expr;
pub mod geometry;
pub mod nonlinear;
pub mod random;
pub mod scalar;
pub mod sparse;

pub use assembly::{apply_generator, assemble, assemble_with, x_inner, x_norm, DiscreteOperator, NormKind, Quadrature, StateVector};
pub use error::{Error, Hypothesis, Result, Violation};
pub use expr::{Expr, Field, Point};
pub use geometry::{sample_metric, Mesh, MeshKind, MetricSample, MetricSpec};
pub use scalar::Scalar;
pub use sparse::{SparseMatrix, SpdSolver};
pub use evolution::{
    estimate_m0, evolve_linear, kato_probe, kato_scan, resolvent_solve, step_midpoint, Forcing, M0Options, NoForcing,
    SourceSpec, System, TimeGrid, Trajectory,
};

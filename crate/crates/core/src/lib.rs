//! Numerical laboratory for the corrector of the random conductance model
//! on periodic lattices.
//!
//! The crate is organized around the pipeline
//!
//!   environment sampling → elliptic solves → corrector / effective matrix
//!   → rescaled field samples → statistics (variance, normal approximation,
//!   moment scaling) → sensitivity derivatives and the normal-approximation
//!   bound → deterministic convolution-sum scans.
//!
//! Everything downstream of a [`environment::SeedSpec`] is a pure function
//! of it, so campaigns are reproducible byte for byte.

pub mod boundlab;
pub mod corrector;
pub mod environment;
pub mod error;
pub mod fft;
pub mod lattice;
pub mod scaling;
pub mod solver;
pub mod stats;
pub mod stein;
pub mod util;

pub use corrector::{
    basis_correctors, effective_matrix, ensemble_effective_matrix, solve_corrector,
    CorrectorSolution, EffectiveMatrix,
};
pub use environment::{
    load_environment, sample_environment, save_environment, ConductanceLaw, Environment, LawKind,
    SeedSpec,
};
pub use error::{Error, Result};
pub use lattice::{
    apply_operator, divergence, gradient, lift_vector, EdgeField, EdgeId, LatticeShape,
    VertexField,
};
pub use solver::{
    dense_oracle_solve, dipole_solve, solve, Preconditioner, SolveReport, SolverConfig,
};

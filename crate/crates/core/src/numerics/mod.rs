//! Numerical substrate: tape autodiff, dense Cholesky, RK4, seeded RNG.

pub mod autodiff;
pub mod linalg;
pub mod ode;
pub mod rng;
pub mod special;

use thiserror::Error;

pub use autodiff::{grad, value_and_grad, Gradients, OpKind, Tape, Var};
pub use linalg::{cholesky_factor, cholesky_solve, DenseMatrix};
pub use ode::{rk4_integrate, Trajectory};
pub use rng::{gaussian_sample, GaussianDraw, Rng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("unsupported operation `{0}`")]
    UnsupportedOp(String),
    #[error("operation {op:?} expects {expected} operands, got {got}")]
    Arity { op: OpKind, expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("integration span must satisfy t1 > t0 (t0={t0}, t1={t1})")]
    InvalidSpan { t0: f64, t1: f64 },
    #[error("simulation diverged at t = {time} s")]
    SimulationDiverged { time: f64 },
    #[error("scale must be non-negative, got {0}")]
    NegativeScale(f64),
}

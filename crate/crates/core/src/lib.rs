//! Policy-gradient primal-dual solver for the cost-constrained linear
//! quadratic regulator, with numerical checks of its duality theory.
//!
//! - [`matcore`]: dense small-matrix kernels.
//! - [`lqr`]: problem container, Lyapunov/Riccati solvers, costs and the
//!   exact policy gradient.
//! - [`primal_dual`]: the alternating PG / projected dual ascent loop plus
//!   regret bookkeeping.
//! - [`duality`]: multiplier construction, KKT certificates and
//!   continuity/monotonicity/smoothness probes.

pub mod duality;
pub mod error;
pub mod lqr;
pub mod matcore;
pub mod par;
pub mod primal_dual;
pub mod problems;

pub use error::{Error, Result};
pub use lqr::{AreSolution, CcLqrProblem, DualPoint, Gain, Penalty, WeightedPenalty};
pub use matcore::{Mat, Vector};

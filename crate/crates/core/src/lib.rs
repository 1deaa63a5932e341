//! Simulation and rate verification for the damped inertial ODE
//!
//! ```text
//! x''(t) + (alpha / t) x'(t) + grad F(x(t)) = 0
//! ```
//!
//! which is the continuous-time limit of Nesterov's accelerated gradient
//! scheme. The crate provides:
//!
//! - [`objective`]: a catalog of benchmark objectives (radial powers, plateau
//!   functions, least squares) with gradients, proximal maps and sampling
//!   probes for the flatness / growth hypotheses.
//! - [`dynamics`]: the discrete Nesterov scheme (gradient and proximal
//!   variants) and a fixed-step RK4 integrator of the ODE.
//! - [`lyapunov`]: the energies `E` and `H` along a trajectory, their
//!   monotonicity diagnostics and the closed-form `H'` identity for powers.
//! - [`rates`]: the piecewise theoretical decay exponent, envelope fits of
//!   empirical exponents and the `z`-sequence optimality verdicts.
//! - [`harness`]: configuration, grid execution, CSV/JSON/SVG output.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod harness;
mod format;
mod linalg;
pub mod lyapunov;
pub mod objective;
pub mod rates;

pub use error::{Error, Result};

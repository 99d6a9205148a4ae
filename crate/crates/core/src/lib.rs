//! Non-expansive ODE-block neural networks.
//!
//! Residual networks built as explicit Runge-Kutta steps along gradient
//! flows of learnable convex potentials are non-expansive as long as each
//! step satisfies a circle-contractivity bound on the operator norms of its
//! weights. This crate implements that machinery end to end: operators and
//! spectral estimation, tableaus and their contractivity radii, constrained
//! networks with adaptive substepping, reverse-mode gradients, training,
//! stability property checks, an l2-PGD robustness harness, and an averaged
//! Plug-and-Play deblurring solver.

pub mod arch;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eig;
pub mod error;
pub mod grad;
pub mod kernels;
pub mod linop;
pub mod net;
pub mod par;
pub mod pnp;
pub mod rng;
pub mod runner;
pub mod tableau;
pub mod train;
pub mod verify;

pub use error::{NxnError, Result};

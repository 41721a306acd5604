//! Fuel-optimal (L1-minimal) low-thrust transfers in the circular restricted
//! three-body problem.
//!
//! The crate computes Pontryagin extremals of the L1-minimization problem by
//! single shooting with homotopy continuation from an energy-smoothed cost,
//! and certifies strict strong-local optimality of the converged bang-bang
//! extremal by propagating Jacobi fields with jump updates at control switches
//! and evaluating second-order conditions on the final-constraint manifold.
//!
//! Module map:
//! - [`dynamics`]: rotating-frame CRTBP vector fields and their derivatives,
//! - [`extremal`]: the PMP canonical system, control laws, and the
//!   event-detecting integrator that produces bang-bang extremals,
//! - [`singular`]: Poisson-bracket ladder, singular-surface membership, and
//!   chattering diagnosis,
//! - [`shooting`]: target manifolds, shooting residual, damped Newton, and
//!   lambda-continuation,
//! - [`sufficiency`]: variational-pair propagation, delta-determinant
//!   conditions, the terminal quadratic form, and the J(xi) diagnostic curve,
//! - [`scenario`] / [`pipeline`]: file-driven configuration and the
//!   solve-then-certify pipeline behind the CLI.

pub mod dynamics;
pub mod error;
pub mod extremal;
pub mod ode;
pub mod pipeline;
pub mod scenario;
pub mod shooting;
pub mod singular;
pub mod sufficiency;

pub use error::Error;

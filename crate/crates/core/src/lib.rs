//! Implicit equilibrium prompt tuning around a frozen backbone.
//!
//! Two deep-equilibrium prompt blocks blend a learned prompt into the input
//! and into the backbone representation. Gradients through the equilibria are
//! obtained from the adjoint fixed point instead of unrolling the solver, and
//! the trainable set is optimised with a criticality-partitioned update.

pub mod deq;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lion;
pub mod numerics;
pub mod persist;
pub mod rng;
pub mod robust_opt;

pub use error::{Error, Result};

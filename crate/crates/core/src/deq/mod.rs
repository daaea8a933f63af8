//! Equilibrium prompt blocks.
//!
//! A [`DeqCell`] defines `f(z, x) = σ(W z + U x + b)` with `W` rescaled to a
//! spectral norm of at most `kappa`, which makes `f` a contraction in `z`.
//! The forward pass solves `z* = f(z*, x)`; the backward pass solves the
//! adjoint `o = (∂f/∂z)ᵀ o + y` with the same fixed-point machinery and then
//! backpropagates `o` through one application of the cell body.

mod cell;
mod solver;
mod stack;

pub use cell::{spectral_norm_estimate, Activation, DeqCell, DeqGrads, DEFAULT_KAPPA, DEFAULT_POWER_ITERS};
pub use solver::{fixed_point, SolveReport, SolverConfig};
pub use stack::{DeqStack, StackTrace};

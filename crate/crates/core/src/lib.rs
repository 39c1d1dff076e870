//! Nonlocal energies on thin films: lattice discretizations, kernel
//! hypothesis audits, energy evaluation, minimization over Dirichlet and
//! periodic classes, and homogenized densities in the three regimes of the
//! ratio between nonlocality horizon and film thickness.
//!
//! The runnable examples under `examples/` walk through each capability:
//!
//! - `audit`: hypothesis checks for the built-in kernels
//! - `energy`: one energy with its per-offset breakdown, in both frames
//! - `scaling`: vertical scaling factors and the singular-kernel exponent
//! - `cell`: cell formulas in the δ, zero and infinity regimes
//! - `asymptotic`: normalized Dirichlet minima on growing cubes
//! - `gamma_min`: minimum problems along (ε, γ) trajectories
//! - `rotation`: the rotation example's asymmetry and invariance
//! - `oracle`: closed forms and stencils

// `!(x > 0.0)` is used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod densities;
pub mod energy;
pub mod error;
pub mod homogenization;
pub mod kernels;
pub mod lattice;
pub mod solvers;

pub use error::{Error, Result};

//! Stochastic Galerkin Hamiltonian variational integrators.
//!
//! This crate is `no_std` (it needs `alloc`). It contains the algorithmic
//! pieces only: system definitions, Wiener increment generation, quadrature,
//! the generic Galerkin stage solver, stochastic partitioned Runge-Kutta
//! tableaus, the registry of named methods, non-symplectic reference
//! integrators and structure-preservation diagnostics.
//!
//! Monte Carlo orchestration, file formats and the command line live in the
//! `sgvi-lab` companion crate.
//!
//! The systems integrated here are Stratonovich SDEs
//!
//! ```text
//! dq =  ∂H/∂p dt + Σ_m ∂h_m/∂p ∘ dW_m
//! dp = -∂H/∂q dt - Σ_m ∂h_m/∂q ∘ dW_m
//! ```
//!
//! on `R^N × R^N`.

#![no_std]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod diagnostics;
pub mod error;
pub mod galerkin;
pub mod model;
pub mod newton;
pub mod noise;
pub mod quadrature;
pub mod reference;
pub mod schemes;
pub mod sprk;

pub use error::{Error, Result};
pub use galerkin::{GalerkinScheme, SolverConfig, StageVector, StepStats};
pub use model::{BuiltinSystem, Hessian, PhaseState, StochasticHamiltonian, Structure, SystemDef};
pub use noise::{IncrementPair, Increments, WienerPath};
pub use quadrature::{LagrangeBasis, QuadratureRule};
pub use schemes::{Method, SchemeId};
pub use sprk::{Sprk32Tableau, SprkTableau};

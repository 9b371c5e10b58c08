//! Meshless solver for steady viscous flow past cylinder cross-sections.
//!
//! The unbounded exterior domain is compressed onto a bounded strip, the
//! transformed steady Navier-Stokes equations are collocated with a radial
//! basis function partition-of-unity (RBF-PU) discretisation, the linear
//! equations are eliminated by a pivoted QR factorisation and the remaining
//! nonlinear system is solved by a dogleg trust-region method with an
//! analytic Jacobian. Reynolds continuation carries solutions up to the
//! onset of vortex shedding.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod par;
pub mod pum;
pub mod rbf;
pub mod sparse;
pub mod system;
pub mod trustregion;

pub use error::{Error, Result};

//! Reconstruction of the free boundary and boundary heat flux of a
//! one-phase Stefan problem from final-time and boundary measurements,
//! by adjoint-based gradient descent with Sobolev preconditioning.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod functional;
pub mod grid;
pub mod models;
pub mod optimize;
pub mod precond;
pub mod verify;

pub use error::{Error, Result};

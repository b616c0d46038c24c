//! Logical-time simulator for distributed asynchronous SGD with bounded
//! gradient staleness.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: datasets, losses with hand-written gradients and declared
//!   Lipschitz / smoothness constants (enforced by gradient clipping).
//! - [`schedule`]: delay paths `tau(j, t)` and learning-rate schedules.
//! - [`engine`]: the parameter-server update with stale gradients.
//! - [`stability`]: coupled twin runs on neighbouring datasets and the
//!   divergence metrics measured on them.
//! - [`theory`]: divergence recursions and closed-form stability bounds.

pub mod engine;
pub mod error;
pub mod fmt;
pub mod model;
pub mod schedule;
pub mod seed;
pub mod stability;
pub mod theory;
mod vector;

pub use error::{Error, Result};
pub use vector::ParameterVector;

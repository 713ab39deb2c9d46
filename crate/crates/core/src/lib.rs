//! Observation-site selection for seismic wavefield reconstruction.
//!
//! The pipeline builds a normalized parameter-sensitivity matrix from
//! finite-difference forward simulations, picks observation sites greedily by
//! a regularized D-optimal criterion, and then estimates twelve layer and
//! hypocenter parameters from the selected sites with pseudo-inverse
//! (Gauss-Newton) updates.

pub mod error;
pub mod estimation;
pub mod experiment;
pub mod forward;
pub mod harness;
pub mod model;
pub mod rng;
pub mod selection;
pub mod sensitivity;

pub use error::{Error, Result};

//! Numerical laboratory for 2-D Stokes flow with the Navier slip boundary
//! condition on the unit square.
//!
//! The velocity field is reduced to a stream function whose Laplacian
//! (the vorticity) obeys the heat equation with zero Dirichlet data, so the
//! flow can be propagated exactly in the eigenbasis of the discrete
//! Laplacian. On top of that forward machinery the crate measures
//! quantitative unique-continuation and observability inequalities and
//! synthesizes minimal-norm / minimal-time bang-bang controls by convex
//! duality.

pub mod config;
pub mod control;
pub mod error;
pub mod export;
pub mod grid;
pub mod observability;
pub mod ops;
pub mod region;
pub mod runner;
pub mod sample;
pub mod spectral;

mod band;
mod numeric;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use grid::{Grid, NodeField, VelocityField};
pub use ops::OperatorSet;
pub use region::{RegionMask, RegionShape, TimeSet};
pub use spectral::EigenBasis;

//! Coarse-grained path sums on a 1D grid, the stationary-phase reduction of
//! a macrovariable, and a deterministic-trajectory model of pointer branch
//! selection.
//!
//! Units are natural (`ħ = 1` by default). Every routine is a pure function
//! of its inputs and seed.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod grids;
pub mod macrovariable;
pub mod measurement;
pub mod pathsum;
pub mod rng;
pub mod schrodinger_ref;
pub mod stats;

pub use error::{Error, Result};
pub use grids::{diagnostics, gaussian_packet, Diagnostics, Potential, SpaceGrid, TimeGrid, WaveFunction};

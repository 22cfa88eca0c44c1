//! Simulation of SDEs with irregular drift along fixed Brownian paths.
//!
//! The crate builds dyadic Brownian paths from counter-based seeds, averages
//! drift fields along them, sews germs into Young-type integrals, computes
//! discrete flows, and runs the Monte Carlo moment checks that go with them.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod averaging;
pub mod error;
pub mod exec;
pub mod fields;
pub mod flow;
pub mod paths;
pub mod quad;
pub mod rng;
pub mod sewing;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Backend;

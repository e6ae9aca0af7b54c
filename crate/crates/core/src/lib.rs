//! Spatially discretized gradient flows for one-dimensional quasistatic
//! viscoelasticity with a density-dependent (Bhattacharya-like) viscosity.
//!
//! The crate provides material laws with certified constants, step-function
//! densities and the Onsager operator, Hellinger/Bhattacharya distances and
//! the induced geodesic distance, an adaptive flow solver, and numerical
//! checks of the stretching, contraction, energy-dissipation and EVI
//! estimates.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod io;
pub mod material;
pub mod numerics;
pub mod ode;
pub mod metric;
pub mod sampling;
pub mod state;

pub use error::{Error, Result};

/// Library version embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

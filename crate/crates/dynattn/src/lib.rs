//! DynAttn: a rolling-window, multi-horizon forecaster for sparse,
//! zero-inflated count panels.
//!
//! The pipeline is: ingest or synthesize panel data ([`data`], [`eval`]),
//! fit a gated weight-tied attention encoder with a ZINB head per spatial
//! unit ([`model`], [`train`]), produce expected counts and exceedance
//! probabilities ([`likelihood`]), and interrogate the fitted model through
//! gates, ablations, and elasticities ([`diagnostics`]).

pub mod data;
pub mod diagnostics;
pub mod diff;
pub mod error;
pub mod eval;
pub mod likelihood;
pub mod model;
pub mod train;

pub use error::{Error, Result};

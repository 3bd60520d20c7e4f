//! Backbone-equated evaluation of diffusion OOD detectors.
//!
//! Every method in this crate reaches a frozen backbone through the same
//! canonical corruption coordinate (logSNR) and the same adapter outputs
//! (`x̂₀`, `ε̂`, hooked activations), and every backbone evaluation is counted.
//! The detector family built on top of that is [`cfs`]: pooled internal
//! snapshots at a few canonical levels scored with a diagonal ID-only
//! statistic. [`baselines`] holds the output-space comparators, [`theory`]
//! the numerical checks of the local Gaussian testing model and [`harness`]
//! the protocol runner.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod backbone;
pub mod baselines;
pub mod canonical;
pub mod cfs;
pub mod config;
pub mod density;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Library version echoed into every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Variance floor shared by slot statistics, density heads and the proxy.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// One input image with its stable identifier.
///
/// The identifier keys the per-image noise streams and the replay lookups, so
/// it must not depend on the order in which images are processed.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: u64,
    pub x0: Tensor,
}

impl Image {
    pub fn new(id: u64, x0: Tensor) -> Self {
        Self { id, x0 }
    }
}

//! Output-space baselines harmonized on the shared canonical corruption and
//! adapter outputs.
//!
//! Each baseline consumes only `x̂₀` and `ε̂` and spends a fixed, declared
//! number of forwards per scored image.

pub mod ddpm_ood;
pub mod diffpath;
pub mod gepc;
pub mod msma;

pub use ddpm_ood::{ddpm_ood_reconstruction, ddpm_ood_score, DdpmOodConfig, DdpmOodStats, Normalization, StartAgg};
pub use diffpath::{diffpath_features, phi_1d, phi_6d, DiffPathConfig, PathVariant, Reduction};
pub use gepc::{gepc_features, gepc_score, GepcCalibrators, GepcConfig, LevelAgg, Transform};
pub use msma::{msma_features, MsmaConfig};

use crate::backbone::Backbone;
use crate::canonical::{build_level_grid, GridConfig, LevelGrid};
use crate::error::Result;

/// The run grid resized to `k_c` levels and realized on `backbone`.
pub fn method_grid(backbone: &dyn Backbone, grid: &GridConfig, k_c: usize) -> Result<LevelGrid> {
    let mut cfg = grid.with_k_c(k_c);
    if backbone.schedule().is_none() {
        cfg.realization = backbone.realization();
    }
    build_level_grid(&cfg, backbone.schedule())
}

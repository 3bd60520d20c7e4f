//! Multiscale score-norm descriptor.

use serde::{Deserialize, Serialize};

use crate::backbone::{Probe, Query};
use crate::canonical::{corrupt, LevelGrid};
use crate::density::DensityKind;
use crate::error::Result;
use crate::rng::{purpose, NoiseSource};
use crate::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsmaConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_k_c")]
    pub k_c: usize,
    #[serde(default = "default_head")]
    pub head: DensityKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_k_c() -> usize {
    10
}
fn default_head() -> DensityKind {
    DensityKind::DiagGaussian
}
fn default_k() -> usize {
    10
}
fn default_components() -> usize {
    4
}
fn default_true() -> bool {
    true
}

impl Default for MsmaConfig {
    fn default() -> Self {
        Self {
            name: None,
            k_c: default_k_c(),
            head: default_head(),
            k: default_k(),
            components: default_components(),
            standardize: true,
        }
    }
}

/// `f_k = ‖ε̂_k‖₂` with an independent corruption at every level.
pub fn msma_features(probe: &Probe<'_>, grid: &LevelGrid, image: &Image, seed: u64) -> Result<Vec<f64>> {
    let noise = NoiseSource::new(seed);
    grid.selected
        .iter()
        .enumerate()
        .map(|(k, level)| {
            let key = [purpose::MSMA, image.id, k as u64];
            let eps = noise.normal_tensor(&key, image.x0.shape());
            let x = corrupt(&image.x0, level, &eps)?;
            let out = probe.forward(&Query::keyed(&x, level, noise.query_key(&key)), &[])?;
            Ok(out.epshat.norm())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AnalyticGaussianBackbone, ForwardCounter};
    use crate::canonical::{build_level_grid, GridConfig, Realization};
    use crate::tensor::Tensor;

    #[test]
    fn oracle_denoiser_near_clean_recovers_noise_norm() {
        // with a tiny prior variance the posterior mean is ≈ m, so ε̂ ≈ ε
        let d = 64;
        let bb = AnalyticGaussianBackbone::new("a", vec![1, 8, 8], vec![0.0; d], vec![1e-10; d], vec![]).unwrap();
        let counter = ForwardCounter::new();
        let probe = Probe::new(&bb, &counter);
        let grid = LevelGrid::explicit(&[4.0], true, None, Realization::Ve).unwrap();
        let noise = NoiseSource::new(3);
        for i in 0..20u64 {
            let img = Image::new(i, Tensor::zeros(&[1, 8, 8]));
            let f = msma_features(&probe, &grid, &img, 3).unwrap();
            let eps = noise.normal_tensor(&[purpose::MSMA, i, 0], &[1, 8, 8]);
            assert!((f[0] - eps.norm()).abs() < 1e-6 * eps.norm());
        }
    }

    #[test]
    fn ten_levels_ten_forwards() {
        let bb = AnalyticGaussianBackbone::new("a", vec![1, 2, 2], vec![0.0; 4], vec![1.0; 4], vec![]).unwrap();
        let counter = ForwardCounter::new();
        let probe = Probe::new(&bb, &counter);
        let cfg = GridConfig { lambda_min: -4.0, lambda_max: 6.0, k_grid: 10, k_c: 10, unique: true, realization: Realization::Ve };
        let grid = build_level_grid(&cfg, None).unwrap();
        let f = msma_features(&probe, &grid, &Image::new(0, Tensor::filled(&[1, 2, 2], 0.3)), 0).unwrap();
        assert_eq!(f.len(), 10);
        assert_eq!(counter.forwards(), 10);
    }
}

//! Statistics of a recursively propagated multilevel denoising path.

use serde::{Deserialize, Serialize};

use crate::backbone::{Probe, Query};
use crate::canonical::{corrupt, LevelGrid};
use crate::density::DensityKind;
use crate::error::{Error, Result};
use crate::rng::{purpose, NoiseSource};
use crate::tensor::Tensor;
use crate::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    AbsMean,
    SqMean,
}

impl Reduction {
    pub fn apply(&self, t: &Tensor) -> f64 {
        let n = t.len() as f64;
        match self {
            Reduction::Mean => t.data().iter().sum::<f64>() / n,
            Reduction::AbsMean => t.data().iter().map(|v| v.abs()).sum::<f64>() / n,
            Reduction::SqMean => t.data().iter().map(|v| v * v).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathVariant {
    D1,
    D6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffPathConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_k_c")]
    pub k_c: usize,
    #[serde(default = "default_variant")]
    pub variant: PathVariant,
    #[serde(default = "default_reduction")]
    pub reduction: Reduction,
    /// Defaults to `kde1d` for d1 and `diag_gaussian` for d6.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<DensityKind>,
    #[serde(default)]
    pub standardize: bool,
}

fn default_k_c() -> usize {
    10
}
fn default_variant() -> PathVariant {
    PathVariant::D1
}
fn default_reduction() -> Reduction {
    Reduction::SqMean
}

impl DiffPathConfig {
    pub fn new(variant: PathVariant) -> Self {
        Self {
            name: None,
            k_c: default_k_c(),
            variant,
            reduction: default_reduction(),
            head: None,
            standardize: false,
        }
    }

    pub fn head(&self) -> DensityKind {
        self.head.unwrap_or(match self.variant {
            PathVariant::D1 => DensityKind::Kde1d,
            PathVariant::D6 => DensityKind::DiagGaussian,
        })
    }
}

/// Per-level path scalars `q_k`.
///
/// The path starts at `a₁x₀ + b₁ε` and moves on by
/// `x_{k+1} = a_{k+1}·x̂₀,k + b_{k+1}·ε̂_k`.
pub fn path_scalars(
    probe: &Probe<'_>,
    grid: &LevelGrid,
    image: &Image,
    seed: u64,
    reduction: Reduction,
) -> Result<Vec<f64>> {
    let noise = NoiseSource::new(seed);
    let key = [purpose::DIFFPATH, image.id];
    let eps = noise.normal_tensor(&key, image.x0.shape());
    let first = &grid.selected[0];
    let mut x = corrupt(&image.x0, first, &eps)?;
    let mut q = Vec::with_capacity(grid.len());
    for (k, level) in grid.selected.iter().enumerate() {
        let query = if k == 0 {
            Query::keyed(&x, level, noise.query_key(&key))
        } else {
            Query::new(&x, level)
        };
        let out = probe.forward(&query, &[])?;
        q.push(reduction.apply(&out.epshat));
        if let Some(next) = grid.selected.get(k + 1) {
            x = out
                .xhat0
                .zip_map(&out.epshat, |x0, e| next.a * x0 + next.b * e)?;
        }
    }
    Ok(q)
}

/// `sqrt(mean_k ((q_{k+1} − q_k)/Δλ_k)²)`.
pub fn phi_1d(q: &[f64], lambdas: &[f64]) -> Result<f64> {
    if q.len() < 2 || q.len() != lambdas.len() {
        return Err(Error::config("diffpath d1 needs at least two levels"));
    }
    let mut acc = 0.0;
    for k in 0..q.len() - 1 {
        let dl = lambdas[k + 1] - lambdas[k];
        if dl == 0.0 {
            return Err(Error::config("diffpath levels repeat a logSNR value"));
        }
        acc += ((q[k + 1] - q[k]) / dl).powi(2);
    }
    Ok((acc / (q.len() - 1) as f64).sqrt())
}

/// `(mean Q, mean Q², ‖Q‖₃, mean|ΔQ|, mean ΔQ², ‖ΔQ‖₃)`; the ΔQ terms are 0
/// for a single-level path.
pub fn phi_6d(q: &[f64]) -> [f64; 6] {
    let n = q.len() as f64;
    let dq: Vec<f64> = q.windows(2).map(|w| w[1] - w[0]).collect();
    let m = dq.len().max(1) as f64;
    let norm3 = |v: &[f64]| v.iter().map(|x| x.abs().powi(3)).sum::<f64>().cbrt();
    [
        q.iter().sum::<f64>() / n,
        q.iter().map(|x| x * x).sum::<f64>() / n,
        norm3(q),
        dq.iter().map(|x| x.abs()).sum::<f64>() / m,
        dq.iter().map(|x| x * x).sum::<f64>() / m,
        norm3(&dq),
    ]
}

pub fn diffpath_features(
    probe: &Probe<'_>,
    grid: &LevelGrid,
    image: &Image,
    seed: u64,
    reduction: Reduction,
    variant: PathVariant,
) -> Result<Vec<f64>> {
    if variant == PathVariant::D1 && grid.len() < 2 {
        return Err(Error::config("diffpath d1 needs at least two levels"));
    }
    let q = path_scalars(probe, grid, image, seed, reduction)?;
    Ok(match variant {
        PathVariant::D1 => vec![phi_1d(&q, &grid.lambdas())?],
        PathVariant::D6 => phi_6d(&q).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AnalyticGaussianBackbone, ForwardCounter};
    use crate::canonical::{build_level_grid, GridConfig, Realization};

    #[test]
    fn phi_examples() {
        assert_eq!(phi_1d(&[2.0, 2.0, 2.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(phi_1d(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(phi_6d(&[0.0, 0.0]), [0.0; 6]);
        assert!(phi_1d(&[1.0], &[1.0]).is_err());
        assert!(phi_1d(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn reversal_keeps_level_moments() {
        let q = [0.3, 1.7, -0.4, 2.2, 0.9];
        let mut r = q;
        r.reverse();
        let (a, b) = (phi_6d(&q), phi_6d(&r));
        assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
    }

    #[test]
    fn path_budget_and_single_level_guard() {
        let bb = AnalyticGaussianBackbone::new("a", vec![1, 2, 2], vec![0.0; 4], vec![1.0; 4], vec![]).unwrap();
        let counter = ForwardCounter::new();
        let probe = Probe::new(&bb, &counter);
        let cfg = GridConfig { lambda_min: -4.0, lambda_max: 6.0, k_grid: 10, k_c: 10, unique: true, realization: Realization::Ve };
        let grid = build_level_grid(&cfg, None).unwrap();
        let img = Image::new(1, Tensor::filled(&[1, 2, 2], 0.5));
        for variant in [PathVariant::D1, PathVariant::D6] {
            let before = counter.forwards();
            let f = diffpath_features(&probe, &grid, &img, 0, Reduction::SqMean, variant).unwrap();
            assert_eq!(counter.forwards() - before, 10);
            assert!(f.iter().all(|v| v.is_finite()));
        }
        let single = LevelGrid::explicit(&[1.0], true, None, Realization::Ve).unwrap();
        assert!(matches!(
            diffpath_features(&probe, &single, &img, 0, Reduction::Mean, PathVariant::D1),
            Err(Error::Config(_))
        ));
        assert_eq!(diffpath_features(&probe, &single, &img, 0, Reduction::Mean, PathVariant::D6).unwrap()[3..], [0.0; 3]);
    }
}

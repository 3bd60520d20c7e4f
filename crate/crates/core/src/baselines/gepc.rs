//! Group-equivariant posterior consistency.

use serde::{Deserialize, Serialize};

use crate::backbone::{Probe, Query};
use crate::canonical::{corrupt, LevelGrid};
use crate::density::{DensityHead, DensityKind, DensityParams};
use crate::error::{Error, Result};
use crate::rng::{purpose, NoiseSource};
use crate::tensor::Tensor;
use crate::{Image, DEFAULT_FLOOR};

/// Invertible transforms of the spatial grid of a `C×H×W` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Hflip,
    Vflip,
    Rot180,
    /// Quarter turn counter-clockwise; square grids only.
    Rot90,
    /// Swap of the spatial axes; square grids only.
    Transpose,
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::config(format!("gepc transforms need C×H×W tensors, got {s:?}"))),
    }
}

/// Source pixel of output pixel `(y, x)` under `g`, or under `g⁻¹` when
/// `inverse` is set. All transforms but the quarter turn are involutions.
fn source(g: Transform, inverse: bool, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
    match (g, inverse) {
        (Transform::Identity, _) => (y, x),
        (Transform::Hflip, _) => (y, w - 1 - x),
        (Transform::Vflip, _) => (h - 1 - y, x),
        (Transform::Rot180, _) => (h - 1 - y, w - 1 - x),
        (Transform::Transpose, _) => (x, y),
        // out[y][x] = in[x][w−1−y]
        (Transform::Rot90, false) => (x, w - 1 - y),
        // out[y][x] = in[h−1−x][y]
        (Transform::Rot90, true) => (h - 1 - x, y),
    }
}

fn remap(g: Transform, inverse: bool, t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims(t)?;
    if matches!(g, Transform::Rot90 | Transform::Transpose) && h != w {
        return Err(Error::config(format!("{g:?} is not invertible on a {h}×{w} grid")));
    }
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source(g, inverse, h, w, y, x);
                out[ch * h * w + y * w + x] = src[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

impl Transform {
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        remap(*self, false, t)
    }

    pub fn apply_inverse(&self, t: &Tensor) -> Result<Tensor> {
        remap(*self, true, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelAgg {
    Mean,
    Weighted,
    Trimmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GepcConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_k_c")]
    pub k_c: usize,
    #[serde(default = "default_group")]
    pub group: Vec<Transform>,
    #[serde(default = "default_calibrator")]
    pub calibrator: DensityKind,
    #[serde(default = "default_level_agg")]
    pub level_agg: LevelAgg,
    /// Per-level weights for `level_agg = "weighted"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Fraction dropped at each end for `level_agg = "trimmed"`.
    #[serde(default = "default_trim")]
    pub trim: f64,
}

fn default_k_c() -> usize {
    2
}
fn default_group() -> Vec<Transform> {
    vec![Transform::Hflip, Transform::Vflip, Transform::Rot180]
}
fn default_calibrator() -> DensityKind {
    DensityKind::Zscore
}
fn default_level_agg() -> LevelAgg {
    LevelAgg::Mean
}
fn default_trim() -> f64 {
    0.1
}

impl Default for GepcConfig {
    fn default() -> Self {
        Self {
            name: None,
            k_c: default_k_c(),
            group: default_group(),
            calibrator: default_calibrator(),
            level_agg: default_level_agg(),
            weights: None,
            trim: default_trim(),
        }
    }
}

impl GepcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group.is_empty() {
            return Err(Error::config("gepc group must not be empty"));
        }
        if !matches!(self.calibrator, DensityKind::Zscore | DensityKind::Kde1d) {
            return Err(Error::config("gepc calibrator must be zscore or kde1d"));
        }
        if self.level_agg == LevelAgg::Weighted {
            match &self.weights {
                Some(w) if w.len() == self.k_c && w.iter().all(|v| *v >= 0.0) && w.iter().sum::<f64>() > 0.0 => {}
                _ => {
                    return Err(Error::config(
                        "gepc weighted level aggregation needs k_c nonnegative weights with positive sum",
                    ))
                }
            }
        }
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::config("gepc trim must lie in [0, 0.5)"));
        }
        Ok(())
    }

    pub fn declared_forwards(&self, levels: usize) -> u64 {
        (levels * (1 + self.group.len())) as u64
    }
}

/// `½‖u/‖u‖ − v/‖v‖‖²`, which equals `1 − cos(u, v)` and is exactly zero for
/// identical inputs.
fn cosine_gap(u: &Tensor, v: &Tensor, floor: f64) -> f64 {
    let (nu, nv) = (u.norm().max(floor), v.norm().max(floor));
    0.5 * u
        .data()
        .iter()
        .zip(v.data())
        .map(|(a, b)| (a / nu - b / nv).powi(2))
        .sum::<f64>()
}

fn relative_gap(u: &Tensor, v: &Tensor, floor: f64) -> Result<f64> {
    let diff = u.zip_map(v, |a, b| a - b)?;
    Ok(diff.norm() / (u.norm() + floor))
}

/// Raw consistency features, ordered (level, transform, feature) with the
/// three features score discrepancy, cosine inconsistency and `x̂₀`
/// discrepancy.
pub fn gepc_features(
    probe: &Probe<'_>,
    grid: &LevelGrid,
    group: &[Transform],
    image: &Image,
    seed: u64,
) -> Result<Vec<f64>> {
    let noise = NoiseSource::new(seed);
    let floor = DEFAULT_FLOOR;
    let mut out = Vec::with_capacity(grid.len() * group.len() * 3);
    for (k, level) in grid.selected.iter().enumerate() {
        if !(level.b > 0.0) {
            return Err(Error::SingularLevel("gepc needs b > 0 for the score".into()));
        }
        let key = [purpose::GEPC, image.id, k as u64];
        let eps = noise.normal_tensor(&key, image.x0.shape());
        let x = corrupt(&image.x0, level, &eps)?;
        let base = probe.forward(&Query::keyed(&x, level, noise.query_key(&key)), &[])?;
        let score = base.epshat.map(|e| -e / level.b);
        for g in group {
            let gx = g.apply(&x)?;
            let moved = probe.forward(&Query::new(&gx, level), &[])?;
            let back_score = g.apply_inverse(&moved.epshat.map(|e| -e / level.b))?;
            let back_x0 = g.apply_inverse(&moved.xhat0)?;
            out.push(relative_gap(&score, &back_score, floor)?);
            out.push(cosine_gap(&score, &back_score, floor));
            out.push(relative_gap(&base.xhat0, &back_x0, floor)?);
        }
    }
    Ok(out)
}

/// Per-feature ID-only calibrators plus the aggregation rule.
#[derive(Debug, Clone)]
pub struct GepcCalibrators {
    heads: Vec<DensityHead>,
    per_level: usize,
    level_agg: LevelAgg,
    weights: Option<Vec<f64>>,
    trim: f64,
}

impl GepcCalibrators {
    pub fn fit(bank: &[Vec<f64>], levels: usize, config: &GepcConfig) -> Result<Self> {
        let d = crate::density::check_bank(bank, 2)?;
        if levels == 0 || d % levels != 0 {
            return Err(Error::domain("gepc features do not split evenly over levels"));
        }
        let params = DensityParams::default();
        let heads = (0..d)
            .map(|j| {
                let col: Vec<Vec<f64>> = bank.iter().map(|z| vec![z[j]]).collect();
                DensityHead::fit(&col, config.calibrator, &params)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            per_level: d / levels,
            level_agg: config.level_agg,
            weights: config.weights.clone(),
            trim: config.trim,
        })
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.heads.len() {
            return Err(Error::domain("gepc feature length does not match calibrators"));
        }
        let mut level_scores = Vec::new();
        for (chunk, heads) in features
            .chunks(self.per_level)
            .zip(self.heads.chunks(self.per_level))
        {
            let mut s = 0.0;
            for (v, h) in chunk.iter().zip(heads) {
                s += h.score(&[*v])?;
            }
            level_scores.push(s / chunk.len() as f64);
        }
        Ok(aggregate_levels(&mut level_scores, self.level_agg, self.weights.as_deref(), self.trim))
    }
}

pub fn aggregate_levels(scores: &mut [f64], agg: LevelAgg, weights: Option<&[f64]>, trim: f64) -> f64 {
    match (agg, weights) {
        (LevelAgg::Weighted, Some(w)) => {
            scores.iter().zip(w).map(|(s, w)| s * w).sum::<f64>() / w.iter().sum::<f64>()
        }
        (LevelAgg::Trimmed, _) => {
            scores.sort_by(|a, b| a.total_cmp(b));
            let cut = (trim * scores.len() as f64).floor() as usize;
            let kept = &scores[cut..scores.len() - cut];
            kept.iter().sum::<f64>() / kept.len() as f64
        }
        _ => scores.iter().sum::<f64>() / scores.len() as f64,
    }
}

pub fn gepc_score(
    probe: &Probe<'_>,
    grid: &LevelGrid,
    group: &[Transform],
    calibrators: &GepcCalibrators,
    image: &Image,
    seed: u64,
) -> Result<f64> {
    calibrators.score(&gepc_features(probe, grid, group, image, seed)?)
}

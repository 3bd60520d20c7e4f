//! Multi-start reconstruction error along the reverse canonical schedule.

use serde::{Deserialize, Serialize};

use crate::backbone::{Probe, Query};
use crate::canonical::{corrupt, LevelGrid};
use crate::error::{Error, Result};
use crate::rng::{purpose, NoiseSource};
use crate::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartAgg {
    Mean,
    Median,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    MeanStd,
    MedianMad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmOodConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_k_c")]
    pub k_c: usize,
    /// Number of starts, evenly spaced over the reverse schedule.
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_agg")]
    pub agg: StartAgg,
    #[serde(default = "default_norm")]
    pub normalization: Normalization,
}

fn default_k_c() -> usize {
    10
}
fn default_starts() -> usize {
    4
}
fn default_agg() -> StartAgg {
    StartAgg::Mean
}
fn default_norm() -> Normalization {
    Normalization::MeanStd
}

impl Default for DdpmOodConfig {
    fn default() -> Self {
        Self {
            name: None,
            k_c: default_k_c(),
            starts: default_starts(),
            agg: default_agg(),
            normalization: default_norm(),
        }
    }
}

/// Grid indices of the starts, evenly spaced and always including the
/// noisiest and (for two or more starts) the cleanest level.
pub fn start_indices(levels: usize, starts: usize) -> Result<Vec<usize>> {
    if starts == 0 || levels == 0 {
        return Err(Error::config("ddpm_ood needs at least one start and one level"));
    }
    if starts > levels {
        return Err(Error::config(format!(
            "ddpm_ood asks for {starts} starts on {levels} levels"
        )));
    }
    if starts == 1 {
        return Ok(vec![levels - 1]);
    }
    Ok((0..starts)
        .map(|i| ((i * (levels - 1)) as f64 / (starts - 1) as f64).round() as usize)
        .collect())
}

/// Forwards per image: the suffix from start index `j` down to the cleanest
/// level has `j + 1` levels.
pub fn declared_forwards(levels: usize, starts: usize) -> Result<u64> {
    Ok(start_indices(levels, starts)?.iter().map(|&j| j as u64 + 1).sum())
}

/// `m_s = ‖x̂₀ − x₀‖²/d` per start, reconstructing deterministically along
/// the reverse suffix `x_{j−1} = a_{j−1}·x̂₀,j + b_{j−1}·ε̂_j`.
pub fn ddpm_ood_reconstruction(
    probe: &Probe<'_>,
    grid: &LevelGrid,
    starts: &[usize],
    image: &Image,
    seed: u64,
) -> Result<Vec<f64>> {
    let noise = NoiseSource::new(seed);
    let d = image.x0.len() as f64;
    starts
        .iter()
        .map(|&s| {
            let key = [purpose::DDPM_OOD, image.id, s as u64];
            let eps = noise.normal_tensor(&key, image.x0.shape());
            let level = grid
                .selected
                .get(s)
                .ok_or_else(|| Error::config(format!("start {s} is outside the grid")))?;
            let mut x = corrupt(&image.x0, level, &eps)?;
            let mut xhat0 = None;
            for j in (0..=s).rev() {
                let lj = &grid.selected[j];
                let query = if j == s {
                    Query::keyed(&x, lj, noise.query_key(&key))
                } else {
                    Query::new(&x, lj)
                };
                let out = probe.forward(&query, &[])?;
                if j > 0 {
                    let next = &grid.selected[j - 1];
                    x = out
                        .xhat0
                        .zip_map(&out.epshat, |x0, e| next.a * x0 + next.b * e)?;
                }
                xhat0 = Some(out.xhat0);
            }
            let xhat0 = xhat0.expect("suffix is nonempty");
            Ok(xhat0
                .data()
                .iter()
                .zip(image.x0.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d)
        })
        .collect()
}

/// Per-start ID-fit location and scale of `m_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpmOodStats {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub agg: StartAgg,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl DdpmOodStats {
    pub fn fit(bank: &[Vec<f64>], normalization: Normalization, agg: StartAgg) -> Result<Self> {
        let s = crate::density::check_bank(bank, 2)?;
        let n = bank.len() as f64;
        let mut center = Vec::with_capacity(s);
        let mut scale = Vec::with_capacity(s);
        for j in 0..s {
            let mut col: Vec<f64> = bank.iter().map(|m| m[j]).collect();
            let (c, sd) = match normalization {
                Normalization::MeanStd => {
                    let mean = col.iter().sum::<f64>() / n;
                    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    (mean, var.sqrt())
                }
                Normalization::MedianMad => {
                    let med = median(&mut col);
                    let mut dev: Vec<f64> = col.iter().map(|v| (v - med).abs()).collect();
                    (med, 1.4826 * median(&mut dev))
                }
            };
            if !(sd > 0.0) {
                return Err(Error::fit(format!(
                    "ddpm_ood start {j} has nonpositive ID scale {sd}"
                )));
            }
            center.push(c);
            scale.push(sd);
        }
        Ok(Self { center, scale, agg })
    }

    pub fn score(&self, m: &[f64]) -> Result<f64> {
        if m.len() != self.center.len() {
            return Err(Error::domain("ddpm_ood feature length does not match the starts"));
        }
        let mut z: Vec<f64> = m
            .iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((v, c), s)| (v - c) / s)
            .collect();
        Ok(aggregate(&mut z, self.agg))
    }
}

pub fn aggregate(z: &mut [f64], agg: StartAgg) -> f64 {
    match agg {
        StartAgg::Mean => z.iter().sum::<f64>() / z.len() as f64,
        StartAgg::Sum => z.iter().sum(),
        StartAgg::Median => median(z),
    }
}

pub fn ddpm_ood_score(
    probe: &Probe<'_>,
    grid: &LevelGrid,
    starts: &[usize],
    stats: &DdpmOodStats,
    image: &Image,
    seed: u64,
) -> Result<f64> {
    stats.score(&ddpm_ood_reconstruction(probe, grid, starts, image, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AnalyticGaussianBackbone, ForwardCounter};
    use crate::canonical::{CanonicalLevel, Realization};
    use crate::tensor::Tensor;

    #[test]
    fn start_layout() {
        assert_eq!(start_indices(10, 4).unwrap(), vec![0, 3, 6, 9]);
        assert_eq!(declared_forwards(10, 4).unwrap(), 22);
        assert_eq!(start_indices(5, 1).unwrap(), vec![4]);
        assert!(start_indices(3, 4).is_err());
    }

    #[test]
    fn noiseless_start_reconstructs_exactly() {
        let bb = AnalyticGaussianBackbone::new("a", vec![1, 2, 2], vec![0.0; 4], vec![1.0; 4], vec![]).unwrap();
        let counter = ForwardCounter::new();
        let probe = Probe::new(&bb, &counter);
        let grid = LevelGrid {
            requested: vec![f64::INFINITY],
            selected: vec![CanonicalLevel::from_coeffs(1.0, 0.0).unwrap()],
            unique: true,
        };
        let img = Image::new(0, Tensor::new(vec![1, 2, 2], vec![0.3, -1.0, 2.0, 0.1]).unwrap());
        let m = ddpm_ood_reconstruction(&probe, &grid, &[0], &img, 0).unwrap();
        assert_eq!(m, vec![0.0]);
        let stats = DdpmOodStats { center: vec![0.5], scale: vec![2.0], agg: StartAgg::Mean };
        assert_eq!(stats.score(&m).unwrap(), -0.25);
    }

    #[test]
    fn suffix_budget_and_aggregation() {
        let bb = AnalyticGaussianBackbone::new("a", vec![1, 2, 2], vec![0.0; 4], vec![1.0; 4], vec![]).unwrap();
        let counter = ForwardCounter::new();
        let probe = Probe::new(&bb, &counter);
        let grid = LevelGrid::explicit(&[4.0, 2.0, 0.0], true, None, Realization::Ve).unwrap();
        let img = Image::new(0, Tensor::filled(&[1, 2, 2], 0.2));
        ddpm_ood_reconstruction(&probe, &grid, &[1, 2], &img, 0).unwrap();
        assert_eq!(counter.forwards(), 5);

        let stats = DdpmOodStats { center: vec![0.0, 0.0], scale: vec![1.0, 1.0], agg: StartAgg::Mean };
        assert_eq!(stats.score(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(aggregate(&mut [1.0, 3.0, 10.0], StartAgg::Median), 3.0);
        assert_eq!(aggregate(&mut [1.0, 3.0], StartAgg::Sum), 4.0);
        assert!(matches!(
            DdpmOodStats::fit(&[vec![1.0], vec![1.0]], Normalization::MeanStd, StartAgg::Mean),
            Err(Error::Fit(_))
        ));
    }
}

//! ID-only density heads shared by the baselines and the CFS ablation heads.
//!
//! Every head returns an OOD-high value: a negative log-density, a distance
//! or a signed standardized deviation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, NoiseSource};
use crate::DEFAULT_FLOOR;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    DiagGaussian,
    Gmm,
    Knn,
    Kde1d,
    Zscore,
}

impl DensityKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DensityKind::DiagGaussian => "diag_gaussian",
            DensityKind::Gmm => "gmm",
            DensityKind::Knn => "knn",
            DensityKind::Kde1d => "kde1d",
            DensityKind::Zscore => "zscore",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityParams {
    pub k: usize,
    pub components: usize,
    pub iterations: usize,
    pub floor: f64,
    pub standardize: bool,
    /// Seeds the first center of the mixture initialization.
    pub seed: u64,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            k: 10,
            components: 4,
            iterations: 50,
            floor: DEFAULT_FLOOR,
            standardize: false,
            seed: 0,
        }
    }
}

/// Coordinatewise mean and population variance, variance floored.
pub fn mean_var(bank: &[Vec<f64>], floor: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = check_bank(bank, 1)?;
    let n = bank.len() as f64;
    let mut mean = vec![0.0; d];
    for z in bank {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for z in bank {
        for ((s, v), m) in var.iter_mut().zip(z).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / n).max(floor));
    Ok((mean, var))
}

/// Checks that the bank holds at least `min` vectors of one common nonzero
/// dimension and returns that dimension.
pub(crate) fn check_bank(bank: &[Vec<f64>], min: usize) -> Result<usize> {
    if bank.len() < min {
        return Err(Error::fit(format!(
            "bank has {} vectors, need at least {min}",
            bank.len()
        )));
    }
    let d = bank.first().map_or(0, |z| z.len());
    if d == 0 {
        return Err(Error::fit("bank vectors are empty"));
    }
    if bank.iter().any(|z| z.len() != d) {
        return Err(Error::domain("bank vectors differ in dimension"));
    }
    Ok(d)
}

fn check_dim(z: &[f64], d: usize) -> Result<()> {
    if z.len() != d {
        return Err(Error::domain(format!(
            "query has dimension {}, head expects {d}",
            z.len()
        )));
    }
    Ok(())
}

/// Per-coordinate affine standardization fitted on a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(bank: &[Vec<f64>], floor: f64) -> Result<Self> {
        let (mean, var) = mean_var(bank, floor)?;
        Ok(Self {
            mean,
            scale: var.iter().map(|v| v.sqrt()).collect(),
        })
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

pub fn diag_gaussian_nll(z: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    0.5 * z
        .iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| LN_2PI + v.ln() + (x - m) * (x - m) / v)
        .sum::<f64>()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl Gmm {
    /// EM from farthest-point seeded centers; the first center is drawn from
    /// a seeded stream, the rest are deterministic given it.
    pub fn fit(bank: &[Vec<f64>], components: usize, iterations: usize, floor: f64, seed: u64) -> Result<Self> {
        let d = check_bank(bank, 2)?;
        if components == 0 {
            return Err(Error::config("gmm needs at least one component"));
        }
        let n = bank.len();
        let k = components.min(n);
        let (_, global_var) = mean_var(bank, floor)?;

        let mut rng = NoiseSource::new(seed).rng(&[purpose::HEAD, n as u64]);
        let mut centers = vec![bank[rng.random_range(0..n)].clone()];
        let mut nearest: Vec<f64> = bank.iter().map(|z| sq_dist(z, &centers[0])).collect();
        while centers.len() < k {
            let (i, _) = nearest
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            centers.push(bank[i].clone());
            for (v, z) in nearest.iter_mut().zip(bank) {
                *v = v.min(sq_dist(z, &centers[centers.len() - 1]));
            }
        }
        let mut model = Gmm {
            log_weights: vec![-(k as f64).ln(); k],
            means: centers,
            vars: vec![global_var; k],
        };

        let mut resp = vec![vec![0.0; k]; n];
        for _ in 0..iterations.max(1) {
            for (z, r) in bank.iter().zip(resp.iter_mut()) {
                for (j, rj) in r.iter_mut().enumerate() {
                    *rj = model.log_weights[j] - diag_gaussian_nll(z, &model.means[j], &model.vars[j]);
                }
                let norm = logsumexp(r);
                r.iter_mut().for_each(|v| *v = (*v - norm).exp());
            }
            for j in 0..k {
                let nj: f64 = resp.iter().map(|r| r[j]).sum();
                if nj < 1e-12 {
                    continue;
                }
                let mut mean = vec![0.0; d];
                for (z, r) in bank.iter().zip(&resp) {
                    for (m, v) in mean.iter_mut().zip(z) {
                        *m += r[j] * v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nj);
                let mut var = vec![0.0; d];
                for (z, r) in bank.iter().zip(&resp) {
                    for ((s, v), m) in var.iter_mut().zip(z).zip(&mean) {
                        *s += r[j] * (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = (*s / nj).max(floor));
                model.means[j] = mean;
                model.vars[j] = var;
                model.log_weights[j] = (nj / n as f64).ln();
            }
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn nll(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.means.len())
            .map(|j| self.log_weights[j] - diag_gaussian_nll(z, &self.means[j], &self.vars[j]))
            .collect();
        -logsumexp(&terms)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean distance to the k-th nearest bank point (k clamped to the bank).
pub fn knn_distance(bank: &[Vec<f64>], z: &[f64], k: usize) -> f64 {
    let k = k.clamp(1, bank.len());
    let mut d: Vec<f64> = bank.iter().map(|b| sq_dist(b, z)).collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    kth.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    DiagGaussian { mean: Vec<f64>, var: Vec<f64> },
    Gmm(Gmm),
    Knn { bank: Vec<Vec<f64>>, k: usize },
    Kde1d { points: Vec<f64>, bandwidth: f64 },
    Zscore { mean: Vec<f64>, std: Vec<f64> },
}

/// A fitted ID-only scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityHead {
    kind: DensityKind,
    dim: usize,
    standardizer: Option<Standardizer>,
    state: State,
}

impl DensityHead {
    pub fn fit(bank: &[Vec<f64>], kind: DensityKind, params: &DensityParams) -> Result<Self> {
        let dim = check_bank(bank, 2)?;
        let floor = params.floor;
        let standardizer = if params.standardize {
            Some(Standardizer::fit(bank, floor)?)
        } else {
            None
        };
        let owned: Vec<Vec<f64>>;
        let bank = match &standardizer {
            Some(s) => {
                owned = bank.iter().map(|z| s.apply(z)).collect();
                owned.as_slice()
            }
            None => bank,
        };
        let state = match kind {
            DensityKind::DiagGaussian => {
                let (mean, var) = mean_var(bank, floor)?;
                State::DiagGaussian { mean, var }
            }
            DensityKind::Gmm => State::Gmm(Gmm::fit(
                bank,
                params.components,
                params.iterations,
                floor,
                params.seed,
            )?),
            DensityKind::Knn => {
                if params.k == 0 {
                    return Err(Error::config("knn needs k ≥ 1"));
                }
                State::Knn {
                    bank: bank.to_vec(),
                    k: params.k,
                }
            }
            DensityKind::Kde1d => {
                if dim != 1 {
                    return Err(Error::config(format!(
                        "kde1d needs one-dimensional features, got {dim}"
                    )));
                }
                let points: Vec<f64> = bank.iter().map(|z| z[0]).collect();
                let bandwidth = silverman_bandwidth(&points, floor);
                State::Kde1d { points, bandwidth }
            }
            DensityKind::Zscore => {
                let (mean, var) = mean_var(bank, floor)?;
                State::Zscore {
                    mean,
                    std: var.iter().map(|v| v.sqrt()).collect(),
                }
            }
        };
        Ok(Self {
            kind,
            dim,
            standardizer,
            state,
        })
    }

    pub fn kind(&self) -> DensityKind {
        self.kind
    }

    pub fn score(&self, z: &[f64]) -> Result<f64> {
        check_dim(z, self.dim)?;
        let owned;
        let z = match &self.standardizer {
            Some(s) => {
                owned = s.apply(z);
                owned.as_slice()
            }
            None => z,
        };
        Ok(match &self.state {
            State::DiagGaussian { mean, var } => diag_gaussian_nll(z, mean, var),
            State::Gmm(g) => g.nll(z),
            State::Knn { bank, k } => knn_distance(bank, z, *k),
            State::Kde1d { points, bandwidth } => kde_nll(points, *bandwidth, z[0]),
            State::Zscore { mean, std } => {
                z.iter()
                    .zip(mean)
                    .zip(std)
                    .map(|((v, m), s)| (v - m) / s)
                    .sum::<f64>()
                    / z.len() as f64
            }
        })
    }
}

/// Silverman's rule, `0.9·min(σ, IQR/1.34)·n^{−1/5}`, floored.
pub fn silverman_bandwidth(points: &[f64], floor: f64) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<f64>() / n;
    let std = (points.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n).sqrt();
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    (0.9 * spread * n.powf(-0.2)).max(floor.sqrt())
}

fn kde_nll(points: &[f64], h: f64, z: f64) -> f64 {
    let terms: Vec<f64> = points
        .iter()
        .map(|p| {
            let u = (z - p) / h;
            -0.5 * u * u
        })
        .collect();
    let log_density = logsumexp(&terms) - (points.len() as f64).ln() - h.ln() - 0.5 * LN_2PI;
    -log_density
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn bank(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = NoiseSource::new(seed).rng(&[0]);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn diag_gaussian_symmetric_pair() {
        let b = vec![vec![-1.0, 2.0], vec![1.0, 4.0]];
        let head = DensityHead::fit(&b, DensityKind::DiagGaussian, &DensityParams::default()).unwrap();
        let s0 = head.score(&b[0]).unwrap();
        let s1 = head.score(&b[1]).unwrap();
        assert!((s0 - s1).abs() < 1e-12);
    }

    #[test]
    fn kde_tail_monotone() {
        let b: Vec<Vec<f64>> = bank(200, 1, 3);
        let head = DensityHead::fit(&b, DensityKind::Kde1d, &DensityParams::default()).unwrap();
        let mut xs: Vec<f64> = b.iter().map(|z| z[0]).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        let median = xs[100];
        assert!(head.score(&[10.0]).unwrap() > head.score(&[median]).unwrap());
        assert!(DensityHead::fit(&bank(10, 2, 0), DensityKind::Kde1d, &DensityParams::default()).is_err());
    }

    #[test]
    fn knn_membership() {
        let b = bank(50, 3, 1);
        let params = DensityParams { k: 1, ..DensityParams::default() };
        let head = DensityHead::fit(&b, DensityKind::Knn, &params).unwrap();
        assert_eq!(head.score(&b[17]).unwrap(), 0.0);
        assert!(head.score(&[5.0, 5.0, 5.0]).unwrap() > 1.0);
    }

    #[test]
    fn degenerate_bank_uses_floor() {
        let b = vec![vec![2.0, 2.0]; 5];
        for kind in [DensityKind::DiagGaussian, DensityKind::Gmm, DensityKind::Zscore, DensityKind::Knn] {
            let head = DensityHead::fit(&b, kind, &DensityParams { standardize: true, ..Default::default() }).unwrap();
            assert!(head.score(&[2.0, 2.0]).unwrap().is_finite());
            assert!(head.score(&[3.0, 2.0]).unwrap() > head.score(&[2.0, 2.0]).unwrap());
        }
        let points = vec![vec![1.0]; 4];
        let head = DensityHead::fit(&points, DensityKind::Kde1d, &DensityParams::default()).unwrap();
        assert!(head.score(&[1.0]).unwrap().is_finite());
    }

    #[test]
    fn single_component_gmm_is_diag_gaussian() {
        let b = bank(300, 4, 9);
        let g = Gmm::fit(&b, 1, 5, DEFAULT_FLOOR, 0).unwrap();
        let (m, v) = mean_var(&b, DEFAULT_FLOOR).unwrap();
        for z in bank(20, 4, 10) {
            assert!((g.nll(&z) - diag_gaussian_nll(&z, &m, &v)).abs() < 1e-9);
        }
    }

    #[test]
    fn gmm_separates_two_clusters() {
        let mut b = bank(200, 2, 4);
        for z in b.iter_mut().skip(100) {
            z[0] += 12.0;
        }
        let g = Gmm::fit(&b, 2, 50, DEFAULT_FLOOR, 1).unwrap();
        assert!(g.nll(&[6.0, 0.0]) > g.nll(&[0.0, 0.0]) + 5.0);
        assert!(g.nll(&[6.0, 0.0]) > g.nll(&[12.0, 0.0]) + 5.0);
    }

    #[test]
    fn too_small_bank() {
        assert!(matches!(
            DensityHead::fit(&[vec![1.0]], DensityKind::Zscore, &DensityParams::default()),
            Err(Error::Fit(_))
        ));
    }
}

//! The local Gaussian testing model as numerical checks.
//!
//! Pooled descriptors at one canonical level are modelled as
//! `z ~ N(μ, Σ)` under ID and `N(μ + Δ, Σ)` under a local shift. The
//! functions here evaluate the separation identities, the moments of the
//! diagonal score and the empirical estimators used as diagnostics.

mod probes;

pub use probes::{low_noise_probe, mismatch_drift, LowNoiseRow, MismatchInputs, MismatchRow};

use nalgebra::{DMatrix, DVector};

use crate::backbone::{HookId, Probe};
use crate::canonical::LevelGrid;
use crate::density::{check_bank, mean_var};
use crate::error::{Error, Result};
use crate::metrics::midranks;
use crate::Image;

/// Minimum eigenvalue accepted for a covariance.
pub const SPD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub delta: DVector<f64>,
    /// Size of the leading decoder block; the remainder is the encoder block.
    pub d_dec: usize,
}

impl LocalModel {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, delta: DVector<f64>, d_dec: usize) -> Result<Self> {
        let d = mu.len();
        if d == 0 || sigma.nrows() != d || sigma.ncols() != d || delta.len() != d {
            return Err(Error::domain("local model dimensions disagree"));
        }
        if d_dec > d {
            return Err(Error::domain(format!("decoder block {d_dec} exceeds dimension {d}")));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-12 * scale {
            return Err(Error::domain("covariance is not symmetric"));
        }
        let min_eig = sigma.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > SPD_TOLERANCE) {
            return Err(Error::domain(format!(
                "covariance is not positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self { mu, sigma, delta, d_dec })
    }

    /// Zero mean, identity-block split.
    pub fn centered(sigma: DMatrix<f64>, delta: DVector<f64>, d_dec: usize) -> Result<Self> {
        Self::new(DVector::zeros(delta.len()), sigma, delta, d_dec)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn d_enc(&self) -> usize {
        self.dim() - self.d_dec
    }

    pub fn diag(&self) -> Vec<f64> {
        self.sigma.diagonal().iter().copied().collect()
    }

    pub fn kappa(&self) -> f64 {
        self.delta
            .iter()
            .zip(self.sigma.diagonal().iter())
            .map(|(d, v)| d * d / v)
            .sum()
    }
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> Result<f64> {
    if v.is_empty() {
        return Ok(0.0);
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::domain("block is not positive definite"))?;
    Ok(v.dot(&chol.solve(v)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub pair: f64,
    pub dec: f64,
    pub residual: f64,
}

/// `ΔᵀΣ⁻¹Δ = Δ_dᵀΣ_dd⁻¹Δ_d + rᵀΣ_{e|d}⁻¹r` with `r = Δ_e − Σ_edΣ_dd⁻¹Δ_d`
/// and `Σ_{e|d}` the Schur complement of the decoder block.
pub fn separation_decomposition(model: &LocalModel) -> Result<Separation> {
    let (d, k) = (model.dim(), model.d_dec);
    let pair = quad_form(&model.sigma, &model.delta)?;
    let s_dd = model.sigma.view((0, 0), (k, k)).into_owned();
    let s_ed = model.sigma.view((k, 0), (d - k, k)).into_owned();
    let s_ee = model.sigma.view((k, k), (d - k, d - k)).into_owned();
    let delta_d = model.delta.rows(0, k).into_owned();
    let delta_e = model.delta.rows(k, d - k).into_owned();
    let (dec, r, schur) = if k == 0 {
        (0.0, delta_e, s_ee)
    } else {
        let chol = s_dd
            .clone()
            .cholesky()
            .ok_or_else(|| Error::domain("decoder block is not positive definite"))?;
        let dec = delta_d.dot(&chol.solve(&delta_d));
        let r = &delta_e - &s_ed * chol.solve(&delta_d);
        let schur = &s_ee - &s_ed * chol.solve(&s_ed.transpose());
        (dec, r, schur)
    };
    let residual = if d == k { 0.0 } else { quad_form(&schur, &r)? };
    Ok(Separation { pair, dec, residual })
}

/// `κ = Σ_j Δ_j²/D_j`.
pub fn kappa(delta: &[f64], diag_var: &[f64]) -> Result<f64> {
    if delta.len() != diag_var.len() {
        return Err(Error::domain("shift and variance lengths differ"));
    }
    if let Some(v) = diag_var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::domain(format!("variance {v} must be positive")));
    }
    Ok(delta.iter().zip(diag_var).map(|(d, v)| d * d / v).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreMoments {
    pub mean_h0: f64,
    pub mean_h1: f64,
    pub var_h0: f64,
    pub var_h1: f64,
}

/// Moments of the oracle diagonal score `(1/d)·Σ (z_j − μ_j)²/D_j`.
pub fn oracle_score_moments(model: &LocalModel) -> ScoreMoments {
    let d = model.dim();
    let inv_sqrt: Vec<f64> = model.diag().iter().map(|v| 1.0 / v.sqrt()).collect();
    let r = DMatrix::from_fn(d, d, |i, j| model.sigma[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let delta = DVector::from_fn(d, |i, _| model.delta[i] * inv_sqrt[i]);
    let tr_r2: f64 = r.iter().map(|v| v * v).sum();
    let df = d as f64;
    let kappa = delta.dot(&delta);
    let var_h0 = 2.0 * tr_r2 / (df * df);
    ScoreMoments {
        mean_h0: 1.0,
        mean_h1: 1.0 + kappa / df,
        var_h0,
        var_h1: var_h0 + 4.0 * delta.dot(&(&r * &delta)) / (df * df),
    }
}

/// Cantelli lower bound on `Pr_H1[score > τ]`.
pub fn cantelli_power(model: &LocalModel, tau: f64) -> Result<f64> {
    let m = oracle_score_moments(model);
    if !(tau < m.mean_h1) {
        return Err(Error::domain(format!(
            "threshold {tau} is not below the H1 mean {}",
            m.mean_h1
        )));
    }
    let gap = m.mean_h1 - tau;
    Ok(1.0 - m.var_h1 / (m.var_h1 + gap * gap))
}

/// `Δ̂ᵀD̂⁻¹Δ̂` with `D̂` the floored diagonal of the ID covariance.
pub fn kappa_hat(id: &[Vec<f64>], ood: &[Vec<f64>], floor: f64) -> Result<f64> {
    let d = check_bank(id, 2)?;
    if check_bank(ood, 2)? != d {
        return Err(Error::domain("ID and OOD descriptors differ in dimension"));
    }
    let (mu_id, var) = mean_var(id, floor)?;
    let (mu_ood, _) = mean_var(ood, floor)?;
    let delta: Vec<f64> = mu_ood.iter().zip(&mu_id).map(|(a, b)| a - b).collect();
    kappa(&delta, &var)
}

/// Spearman correlation with midranks; undefined for constant inputs.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::domain("spearman inputs differ in length"));
    }
    if xs.len() < 3 {
        return Err(Error::domain("spearman needs at least three points"));
    }
    let (rx, ry) = (midranks(xs), midranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("spearman is undefined for a constant sequence"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// `R̂_h` of one hook; the hook-selection proxy at the given levels.
pub fn content_ratio(
    probe: &Probe<'_>,
    hook: &HookId,
    grid: &LevelGrid,
    images: &[Image],
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    crate::cfs::hook_proxy(probe, hook, images, repeats, grid, seed)
}

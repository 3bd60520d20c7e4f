//! Canonical corruption algebra.
//!
//! All corruption is written `x_λ = a·x₀ + b·ε` with `λ = log(a²/b²)`. A
//! backbone realizes a canonical level either through a native discrete
//! timestep (matched in logSNR) or through a continuous noise input whose
//! effective ratio is `b/a = exp(−λ/2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coefficient family used to realize a continuous canonical level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Realization {
    /// `a = 1`, `b = σ̃`.
    #[default]
    Ve,
    /// `a = (1+σ̃²)^{-1/2}`, `b = σ̃(1+σ̃²)^{-1/2}`.
    Vp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NativeBinding {
    Timestep(usize),
    /// Effective noise ratio `σ̃ = b/a` handed to a continuous backbone.
    NoiseInput(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalLevel {
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
    pub native: Option<NativeBinding>,
}

impl CanonicalLevel {
    /// Continuous level with the requested realization.
    pub fn from_logsnr(lambda: f64, realization: Realization) -> Result<Self> {
        let (a, b) = coeffs_from_logsnr(lambda, realization)?;
        Ok(Self {
            lambda,
            a,
            b,
            native: Some(NativeBinding::NoiseInput((-lambda / 2.0).exp())),
        })
    }

    /// Level realized by a native timestep of a discrete schedule.
    pub fn from_timestep(schedule: &DiscreteSchedule, t: usize) -> Result<Self> {
        let alpha_bar = *schedule
            .alpha_bar()
            .get(t)
            .ok_or_else(|| Error::config(format!("timestep {t} outside schedule")))?;
        Ok(Self {
            lambda: schedule.lambdas()[t],
            a: alpha_bar.sqrt(),
            b: (1.0 - alpha_bar).sqrt(),
            native: Some(NativeBinding::Timestep(t)),
        })
    }

    /// Level from explicit coefficients. `b = 0` gives the noiseless limit
    /// `λ = +∞`.
    pub fn from_coeffs(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0) || !(b >= 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::domain(format!("invalid coefficients a={a}, b={b}")));
        }
        let lambda = if b == 0.0 {
            f64::INFINITY
        } else {
            logsnr_from_coeffs(a, b)?
        };
        Ok(Self {
            lambda,
            a,
            b,
            native: None,
        })
    }

    pub fn timestep(&self) -> Option<usize> {
        match self.native {
            Some(NativeBinding::Timestep(t)) => Some(t),
            _ => None,
        }
    }
}

pub fn logsnr_from_coeffs(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::domain(format!(
            "coefficients must be positive, got a={a}, b={b}"
        )));
    }
    Ok(2.0 * (a.ln() - b.ln()))
}

pub fn coeffs_from_logsnr(lambda: f64, realization: Realization) -> Result<(f64, f64)> {
    if !lambda.is_finite() {
        return Err(Error::domain(format!("logSNR must be finite, got {lambda}")));
    }
    let ratio = (-lambda / 2.0).exp();
    Ok(match realization {
        Realization::Ve => (1.0, ratio),
        Realization::Vp => {
            let norm = 1.0f64.hypot(ratio);
            (1.0 / norm, ratio / norm)
        }
    })
}

/// Cumulative coefficients `ᾱ_t` of a discrete backbone, cleanest first.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    alpha_bar: Vec<f64>,
    lambdas: Vec<f64>,
}

impl DiscreteSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::config("discrete schedule is empty"));
        }
        if let Some(bad) = alpha_bar.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::config(format!(
                "schedule coefficient {bad} outside (0, 1)"
            )));
        }
        let lambdas: Vec<f64> = alpha_bar.iter().map(|&v| (v / (1.0 - v)).ln()).collect();
        if lambdas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::config(
                "schedule must be strictly decreasing in logSNR",
            ));
        }
        Ok(Self { alpha_bar, lambdas })
    }

    /// Schedule whose induced logSNRs are exactly the given values.
    pub fn from_lambdas(lambdas: &[f64]) -> Result<Self> {
        let alpha_bar = lambdas.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
        let mut schedule = Self::new(alpha_bar)?;
        schedule.lambdas = lambdas.to_vec();
        Ok(schedule)
    }

    /// Linear-β DDPM schedule with `steps` timesteps.
    pub fn linear_beta(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for t in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                t as f64 / (steps - 1) as f64
            };
            let beta = beta_start + frac * (beta_end - beta_start);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::new(alpha_bar)
    }

    /// Parses one `ᾱ_t` per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| {
                Error::config(format!("schedule line {}: cannot parse {line:?}", lineno + 1))
            })?;
            values.push(v);
        }
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
}

/// Nearest native timestep in logSNR; ties go to the cleaner timestep.
pub fn match_discrete_level(schedule: &DiscreteSchedule, lambda: f64) -> Result<usize> {
    let lambdas = schedule.lambdas();
    if lambdas.is_empty() {
        return Err(Error::config("cannot match against an empty schedule"));
    }
    if lambda.is_nan() {
        return Err(Error::domain("cannot match a NaN logSNR"));
    }
    let dist = |t: usize| (lambdas[t] - lambda).abs();
    // First index whose logSNR is at or below the request.
    let split = lambdas.partition_point(|&l| l > lambda);
    let mut best = if split == 0 {
        0
    } else if split == lambdas.len() || dist(split - 1) <= dist(split) {
        split - 1
    } else {
        split
    };
    // Rounded distances can tie with cleaner timesteps; the scan order wins.
    while best > 0 && dist(best - 1) <= dist(best) {
        best -= 1;
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub k_grid: usize,
    pub k_c: usize,
    #[serde(default = "default_true")]
    pub unique: bool,
    #[serde(default)]
    pub realization: Realization,
}

fn default_true() -> bool {
    true
}

impl GridConfig {
    pub fn single(lambda: f64) -> Self {
        Self {
            lambda_min: lambda,
            lambda_max: lambda,
            k_grid: 1,
            k_c: 1,
            unique: true,
            realization: Realization::Ve,
        }
    }

    pub fn with_k_c(&self, k_c: usize) -> Self {
        Self {
            k_c,
            k_grid: self.k_grid.max(k_c),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    pub requested: Vec<f64>,
    pub selected: Vec<CanonicalLevel>,
    pub unique: bool,
}

impl LevelGrid {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.selected.iter().map(|l| l.lambda).collect()
    }

    /// Grid over an explicit list of canonical levels.
    pub fn explicit(
        lambdas: &[f64],
        unique: bool,
        schedule: Option<&DiscreteSchedule>,
        realization: Realization,
    ) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::config("explicit level list is empty"));
        }
        let mut requested = lambdas.to_vec();
        requested.sort_by(|a, b| b.total_cmp(a));
        let selected = realize(&requested, unique, schedule, realization, requested.len())?;
        Ok(Self {
            requested,
            selected,
            unique,
        })
    }
}

fn linspace_desc(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n)
            .map(|i| hi - (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn even_subsample<T: Clone>(items: &[T], k: usize) -> Vec<T> {
    if items.len() <= k {
        return items.to_vec();
    }
    if k == 1 {
        return vec![items[0].clone()];
    }
    let n = items.len();
    (0..k)
        .map(|i| items[((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize].clone())
        .collect()
}

/// Maps requested logSNRs (clean to noisy) to realized levels, removing
/// repeats when `unique` is set, and keeps at most `k_c` of them.
fn realize(
    requested: &[f64],
    unique: bool,
    schedule: Option<&DiscreteSchedule>,
    realization: Realization,
    k_c: usize,
) -> Result<Vec<CanonicalLevel>> {
    let candidates: Vec<CanonicalLevel> = match schedule {
        Some(schedule) => {
            let mut seen = Vec::new();
            let mut out = Vec::new();
            for &lambda in requested {
                let t = match_discrete_level(schedule, lambda)?;
                if unique && seen.contains(&t) {
                    continue;
                }
                seen.push(t);
                out.push(CanonicalLevel::from_timestep(schedule, t)?);
            }
            out
        }
        None => {
            let mut out: Vec<CanonicalLevel> = Vec::new();
            for &lambda in requested {
                if unique && out.iter().any(|l| l.lambda == lambda) {
                    continue;
                }
                out.push(CanonicalLevel::from_logsnr(lambda, realization)?);
            }
            out
        }
    };
    let selected = even_subsample(&candidates, k_c);
    if selected.is_empty() {
        return Err(Error::config("level grid collapsed to zero levels"));
    }
    Ok(selected)
}

pub fn build_level_grid(config: &GridConfig, schedule: Option<&DiscreteSchedule>) -> Result<LevelGrid> {
    let GridConfig {
        lambda_min,
        lambda_max,
        k_grid,
        k_c,
        unique,
        realization,
    } = *config;
    if !lambda_min.is_finite() || !lambda_max.is_finite() {
        return Err(Error::config("grid bounds must be finite"));
    }
    if lambda_min > lambda_max {
        return Err(Error::config(format!(
            "lambda_min {lambda_min} exceeds lambda_max {lambda_max}"
        )));
    }
    if k_grid == 0 || k_c == 0 {
        return Err(Error::config("level grid collapsed to zero levels"));
    }
    if k_c > k_grid {
        return Err(Error::config(format!("k_c {k_c} exceeds k_grid {k_grid}")));
    }
    let requested = linspace_desc(lambda_min, lambda_max, k_grid);
    let selected = match schedule {
        Some(_) => realize(&requested, unique, schedule, realization, k_c)?,
        None => realize(
            &linspace_desc(lambda_min, lambda_max, k_c),
            unique,
            None,
            realization,
            k_c,
        )?,
    };
    Ok(LevelGrid {
        requested,
        selected,
        unique,
    })
}

/// `a·x₀ + b·ε`, elementwise.
pub fn corrupt(x0: &Tensor, level: &CanonicalLevel, noise: &Tensor) -> Result<Tensor> {
    let (a, b) = (level.a, level.b);
    x0.zip_map(noise, |x, e| a * x + b * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scan_oracle(schedule: &DiscreteSchedule, lambda: f64) -> usize {
        let mut best = 0;
        for t in 1..schedule.len() {
            if (schedule.lambdas()[t] - lambda).abs() < (schedule.lambdas()[best] - lambda).abs() {
                best = t;
            }
        }
        best
    }

    fn three_step() -> DiscreteSchedule {
        DiscreteSchedule::new(vec![0.9, 0.5, 0.1]).unwrap()
    }

    #[test]
    fn logsnr_examples() {
        assert_eq!(logsnr_from_coeffs(0.5, 0.5).unwrap(), 0.0);
        assert!((logsnr_from_coeffs(1.0, (-2.5f64).exp()).unwrap() - 5.0).abs() < 1e-12);
        assert!(logsnr_from_coeffs(0.70711, 0.70711).unwrap().abs() < 1e-8);
        assert!(matches!(logsnr_from_coeffs(0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(logsnr_from_coeffs(1.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn coeff_examples() {
        let (a, b) = coeffs_from_logsnr(0.0, Realization::Vp).unwrap();
        assert!((a - 0.7071068).abs() < 1e-7 && (b - 0.7071068).abs() < 1e-7);
        let (a, b) = coeffs_from_logsnr(5.0, Realization::Ve).unwrap();
        assert_eq!(a, 1.0);
        assert!((b - 0.0820850).abs() < 1e-7);
        assert_eq!(coeffs_from_logsnr(0.0, Realization::Ve).unwrap(), (1.0, 1.0));
        assert!(coeffs_from_logsnr(f64::NAN, Realization::Ve).is_err());
    }

    #[test]
    fn discrete_match_examples() {
        let s = three_step();
        assert_eq!(match_discrete_level(&s, 0.0).unwrap(), 1);
        assert_eq!(match_discrete_level(&s, 2.1972).unwrap(), 0);
        assert_eq!(match_discrete_level(&s, 9f64.ln() / 2.0).unwrap(), 0);
        assert_eq!(match_discrete_level(&s, 50.0).unwrap(), 0);
        assert_eq!(match_discrete_level(&s, -50.0).unwrap(), 2);
    }

    #[test]
    fn schedule_validation() {
        assert!(matches!(DiscreteSchedule::new(vec![]), Err(Error::Config(_))));
        assert!(DiscreteSchedule::new(vec![0.5, 0.5]).is_err());
        assert!(DiscreteSchedule::new(vec![1.0, 0.5]).is_err());
        assert!(DiscreteSchedule::new(vec![0.1, 0.5]).is_err());
        let parsed = DiscreteSchedule::parse("# alpha bar\n0.9\n\n0.5\n0.1\n").unwrap();
        assert_eq!(parsed, three_step());
        assert!(DiscreteSchedule::parse("0.9\nabc\n").is_err());
        let lin = DiscreteSchedule::linear_beta(1000, 1e-4, 0.02).unwrap();
        assert_eq!(lin.len(), 1000);
    }

    #[test]
    fn grid_single_explicit_level() {
        let grid = build_level_grid(&GridConfig::single(5.0), None).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid.selected[0].lambda, 5.0);
    }

    #[test]
    fn grid_dedups_discrete_collisions() {
        // Two timesteps at logSNR 3.5 and 0.5: the five requests 4,3,2,1,0 map to
        // t = 0,0,{tie→0},1,1 so only two distinct levels survive.
        let schedule = DiscreteSchedule::from_lambdas(&[3.5, 0.5]).unwrap();
        let cfg = GridConfig {
            lambda_min: 0.0,
            lambda_max: 4.0,
            k_grid: 5,
            k_c: 5,
            unique: true,
            realization: Realization::Ve,
        };
        let grid = build_level_grid(&cfg, Some(&schedule)).unwrap();
        assert_eq!(grid.requested.len(), 5);
        assert_eq!(grid.len(), 2);
        assert_eq!(grid.selected[0].timestep(), Some(0));
        assert_eq!(grid.selected[1].timestep(), Some(1));

        let dup = build_level_grid(&GridConfig { unique: false, ..cfg }, Some(&schedule)).unwrap();
        assert_eq!(dup.len(), 5);
    }

    #[test]
    fn grid_degenerate_range() {
        let cfg = GridConfig {
            lambda_min: 0.0,
            lambda_max: 0.0,
            k_grid: 3,
            k_c: 3,
            unique: true,
            realization: Realization::Ve,
        };
        let grid = build_level_grid(&cfg, None).unwrap();
        assert_eq!(grid.requested, vec![0.0; 3]);
        assert_eq!(grid.len(), 1);
    }

    #[test]
    fn grid_errors() {
        let mut cfg = GridConfig::single(1.0);
        cfg.k_c = 0;
        assert!(matches!(build_level_grid(&cfg, None), Err(Error::Config(_))));
        cfg.k_c = 2;
        assert!(build_level_grid(&cfg, None).is_err());
        let inverted = GridConfig {
            lambda_min: 2.0,
            lambda_max: 1.0,
            ..GridConfig::single(1.0)
        };
        assert!(build_level_grid(&inverted, None).is_err());
    }

    #[test]
    fn grid_subsamples_to_k_c_clean_to_noisy() {
        let schedule = DiscreteSchedule::linear_beta(1000, 1e-4, 0.02).unwrap();
        let cfg = GridConfig {
            lambda_min: -4.0,
            lambda_max: 6.0,
            k_grid: 64,
            k_c: 10,
            unique: true,
            realization: Realization::Vp,
        };
        let grid = build_level_grid(&cfg, Some(&schedule)).unwrap();
        assert_eq!(grid.len(), 10);
        let ts: Vec<usize> = grid.selected.iter().map(|l| l.timestep().unwrap()).collect();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        assert!(grid.selected.windows(2).all(|w| w[0].lambda > w[1].lambda));
    }

    #[test]
    fn corrupt_examples() {
        let x0 = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let clean = CanonicalLevel::from_coeffs(1.0, 0.0).unwrap();
        let noise = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(corrupt(&x0, &clean, &noise).unwrap(), x0);

        let level = CanonicalLevel::from_coeffs(0.6, 0.8).unwrap();
        let out = corrupt(&Tensor::zeros(&[3]), &level, &Tensor::filled(&[3], 1.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));

        let vp = CanonicalLevel::from_logsnr(0.0, Realization::Vp).unwrap();
        let one = Tensor::filled(&[1], 1.0);
        let v = corrupt(&one, &vp, &one).unwrap().data()[0];
        assert!((v - 1.4142136).abs() < 1e-7);

        assert!(corrupt(&x0, &level, &Tensor::zeros(&[2])).is_err());
    }

    fn random_schedule(values: Vec<f64>) -> DiscreteSchedule {
        let mut lambdas = values;
        lambdas.sort_by(|a, b| b.total_cmp(a));
        lambdas.dedup();
        DiscreteSchedule::from_lambdas(&lambdas).unwrap()
    }

    proptest! {
        #[test]
        fn coefficient_round_trip(lambda in -10.0f64..10.0) {
            for r in [Realization::Ve, Realization::Vp] {
                let (a, b) = coeffs_from_logsnr(lambda, r).unwrap();
                prop_assert!((logsnr_from_coeffs(a, b).unwrap() - lambda).abs() <= 1e-10);
                prop_assert!((b / a - (-lambda / 2.0).exp()).abs() <= 1e-12 * (-lambda / 2.0).exp().max(1.0));
            }
            let (ae, be) = coeffs_from_logsnr(lambda, Realization::Ve).unwrap();
            let (ap, bp) = coeffs_from_logsnr(lambda, Realization::Vp).unwrap();
            prop_assert!((be / ae - bp / ap).abs() <= 1e-12 * (be / ae).max(1.0));
        }

        #[test]
        fn match_equals_scan(values in proptest::collection::vec(-12.0f64..12.0, 1..40), probe in -15.0f64..15.0) {
            let s = random_schedule(values);
            prop_assert_eq!(match_discrete_level(&s, probe).unwrap(), scan_oracle(&s, probe));
            for &l in s.lambdas() {
                prop_assert_eq!(match_discrete_level(&s, l).unwrap(), scan_oracle(&s, l));
            }
        }

        #[test]
        fn match_is_monotone(values in proptest::collection::vec(-12.0f64..12.0, 1..40), p in -15.0f64..15.0, q in -15.0f64..15.0) {
            let s = random_schedule(values);
            let (lo, hi) = if p < q { (p, q) } else { (q, p) };
            prop_assert!(match_discrete_level(&s, hi).unwrap() <= match_discrete_level(&s, lo).unwrap());
        }

        #[test]
        fn corrupt_is_affine_without_noise(
            xs in proptest::collection::vec(-5.0f64..5.0, 6),
            ys in proptest::collection::vec(-5.0f64..5.0, 6),
            alpha in -3.0f64..3.0, beta in -3.0f64..3.0, lambda in -6.0f64..6.0,
        ) {
            let level = CanonicalLevel::from_logsnr(lambda, Realization::Vp).unwrap();
            let zero = Tensor::zeros(&[6]);
            let x = Tensor::from_vec(xs);
            let y = Tensor::from_vec(ys);
            let combo = x.zip_map(&y, |u, v| alpha * u + beta * v).unwrap();
            let lhs = corrupt(&combo, &level, &zero).unwrap();
            let cx = corrupt(&x, &level, &zero).unwrap();
            let cy = corrupt(&y, &level, &zero).unwrap();
            let rhs = cx.zip_map(&cy, |u, v| alpha * u + beta * v).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}

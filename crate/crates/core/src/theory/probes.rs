use crate::backbone::{Backbone, ForwardCounter, HookId, Probe, Query};
use crate::canonical::{corrupt, match_discrete_level, CanonicalLevel, DiscreteSchedule, LevelGrid};
use crate::cfs::{pool, CfsConfig, CfsDetector, CfsMode};
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::rng::{purpose, NoiseSource};
use crate::tensor::Tensor;
use crate::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowNoiseRow {
    pub lambda: f64,
    pub b_squared: f64,
    /// Mean squared distance of the pooled descriptor from its noiseless value.
    pub variance: f64,
    /// `b²·tr(WWᵀ)`, when the hook is affine with a pointwise layout.
    pub exact: Option<f64>,
}

/// Within-image spread of a hooked descriptor at each level.
///
/// The same noise draws are used at every level, so the ratio to the exact
/// first-order term isolates the `b²` scaling.
pub fn low_noise_probe(
    backbone: &dyn Backbone,
    hook: &HookId,
    levels: &[CanonicalLevel],
    x0: &Tensor,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<LowNoiseRow>> {
    if n_draws < 1000 {
        return Err(Error::config(format!("low-noise probe needs ≥ 1000 draws, got {n_draws}")));
    }
    let trace = backbone.affine_jacobian_trace(hook);
    if trace.is_none() {
        log::warn!("hook {hook} is not affine; low-noise probe runs in empirical mode");
    }
    let noise = NoiseSource::new(seed);
    let hooks = std::slice::from_ref(hook);
    levels
        .iter()
        .map(|level| {
            let clean_input = x0.map(|v| level.a * v);
            let reference = pool(backbone.evaluate(&Query::new(&clean_input, level), hooks)?.activation(hook)?)?;
            let mut acc = 0.0;
            for r in 0..n_draws {
                let eps = noise.normal_tensor(&[purpose::THEORY, r as u64], x0.shape());
                let x = corrupt(x0, level, &eps)?;
                let z = pool(backbone.evaluate(&Query::new(&x, level), hooks)?.activation(hook)?)?;
                acc += z.iter().zip(&reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            let b2 = level.b * level.b;
            Ok(LowNoiseRow {
                lambda: level.lambda,
                b_squared: b2,
                variance: acc / n_draws as f64,
                exact: trace.map(|t| b2 * t),
            })
        })
        .collect()
}

/// Inputs of one mismatch probe.
pub struct MismatchInputs<'a> {
    pub backbone: &'a dyn Backbone,
    pub hooks: &'a [HookId],
    pub fit: &'a [Image],
    pub id_test: &'a [Image],
    pub ood_test: &'a [Image],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchRow {
    pub lambda_ref: f64,
    pub lambda_matched: f64,
    pub mismatch: f64,
    /// Mean |S_t − S_ref| over the test batch in units of the ID-fit score
    /// standard deviation at the reference level.
    pub drift: f64,
    /// AUROC at the matched level minus AUROC at the reference level.
    pub auroc_delta: f64,
}

fn scores_at(inputs: &MismatchInputs<'_>, level: CanonicalLevel) -> Result<(Vec<f64>, f64, f64)> {
    let grid = LevelGrid {
        requested: vec![level.lambda],
        selected: vec![level],
        unique: true,
    };
    let counter = ForwardCounter::new();
    let probe = Probe::new(inputs.backbone, &counter);
    let config = CfsConfig {
        levels: vec![level.lambda],
        mode: CfsMode { levels: 1, hooks: inputs.hooks.len() },
        ..CfsConfig::default()
    };
    let mut det = CfsDetector::new(config, grid, inputs.hooks.to_vec())?;
    det.fit(&probe, inputs.fit, inputs.seed)?;
    let score = |imgs: &[Image]| -> Result<Vec<f64>> {
        imgs.iter().map(|im| det.score(&probe, im, inputs.seed)).collect()
    };
    let fit_scores = score(inputs.fit)?;
    let n = fit_scores.len() as f64;
    let mean = fit_scores.iter().sum::<f64>() / n;
    let std = (fit_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut batch = score(inputs.id_test)?;
    batch.extend(score(inputs.ood_test)?);
    let a = auroc(&batch[..inputs.id_test.len()], &batch[inputs.id_test.len()..])?;
    Ok((batch, a, std))
}

/// Scores the batch at the exact reference level and at the nearest level of
/// `schedule`, both realized with the backbone's continuous coefficients.
pub fn mismatch_drift(inputs: &MismatchInputs<'_>, lambda_ref: f64, schedule: &DiscreteSchedule) -> Result<MismatchRow> {
    let t = match_discrete_level(schedule, lambda_ref)?;
    let lambda_t = schedule.lambdas()[t];
    let realization = inputs.backbone.realization();
    let (s_ref, a_ref, std_ref) = scores_at(inputs, CanonicalLevel::from_logsnr(lambda_ref, realization)?)?;
    let (s_t, a_t, _) = scores_at(inputs, CanonicalLevel::from_logsnr(lambda_t, realization)?)?;
    let mean_abs = s_ref
        .iter()
        .zip(&s_t)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / s_ref.len() as f64;
    Ok(MismatchRow {
        lambda_ref,
        lambda_matched: lambda_t,
        mismatch: (lambda_ref - lambda_t).abs(),
        drift: if mean_abs == 0.0 { 0.0 } else { mean_abs / std_ref.max(crate::DEFAULT_FLOOR) },
        auroc_delta: a_t - a_ref,
    })
}

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::{unknown_hook, Backbone, BackboneOutput, HookId, Query};
use crate::backbone::recover_epshat;
use crate::canonical::{DiscreteSchedule, Realization};
use crate::config::{AnalyticConfig, FeatureMapConfig, MapInit};
use crate::error::{Error, Result};
use crate::rng::{purpose, NoiseSource};
use crate::tensor::Tensor;

/// Affine read-out `W·x_λ + c`, reshaped to `layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub hook: HookId,
    /// Row-major `rows × d`.
    pub weight: Vec<f64>,
    pub offset: Vec<f64>,
    pub layout: Vec<usize>,
}

impl FeatureMap {
    pub fn new(hook: HookId, weight: Vec<f64>, offset: Vec<f64>, layout: Vec<usize>) -> Result<Self> {
        let rows: usize = layout.iter().product();
        if rows == 0 || !weight.len().is_multiple_of(rows) || offset.len() != rows {
            return Err(Error::config(format!(
                "feature map {hook}: weight/offset sizes do not match layout {layout:?}"
            )));
        }
        Ok(Self {
            hook,
            weight,
            offset,
            layout,
        })
    }

    pub fn rows(&self) -> usize {
        self.offset.len()
    }

    fn apply(&self, x: &[f64]) -> Tensor {
        let d = x.len();
        let data = self
            .weight
            .chunks_exact(d)
            .zip(&self.offset)
            .map(|(row, c)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + c)
            .collect();
        Tensor::new(self.layout.clone(), data).expect("layout matches rows")
    }

    fn from_config(cfg: &FeatureMapConfig, d: usize) -> Result<Self> {
        let hook = HookId::parse(&cfg.name)?;
        let mut layout = vec![cfg.channels];
        layout.extend(&cfg.spatial);
        let rows: usize = layout.iter().product();
        if rows == 0 {
            return Err(Error::config(format!("feature map {} is empty", cfg.name)));
        }
        let mut weight = vec![0.0; rows * d];
        match cfg.init {
            MapInit::Random => {
                let mut rng = NoiseSource::new(cfg.seed).rng(&[purpose::WEIGHTS, cfg.seed]);
                let std = cfg.scale / (d as f64).sqrt();
                for w in &mut weight {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = std * z;
                }
            }
            MapInit::Identity => {
                if rows != d {
                    return Err(Error::config(format!(
                        "identity map {} needs {d} rows, layout gives {rows}",
                        cfg.name
                    )));
                }
                for i in 0..d {
                    weight[i * d + i] = cfg.scale;
                }
            }
            MapInit::Select => {
                let indices = cfg.indices.as_ref().ok_or_else(|| {
                    Error::config(format!("select map {} needs `indices`", cfg.name))
                })?;
                if indices.len() != rows {
                    return Err(Error::config(format!(
                        "select map {} has {} indices for {rows} rows",
                        cfg.name,
                        indices.len()
                    )));
                }
                for (r, &i) in indices.iter().enumerate() {
                    if i >= d {
                        return Err(Error::config(format!("select index {i} out of range")));
                    }
                    weight[r * d + i] = cfg.scale;
                }
            }
        }
        Self::new(hook, weight, vec![cfg.offset; rows], layout)
    }
}

/// Exact Gaussian denoiser with affine feature hooks.
///
/// With prior `x₀ ~ N(m, diag S)` the posterior mean is
/// `m + aS(a²S + b²)⁻¹(x_λ − a·m)`; `ε̂` is derived from it through the shared
/// recovery rule. Hooks are affine in the corrupted input, so pooled
/// descriptors follow the local Gaussian model exactly.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianBackbone {
    name: String,
    shape: Vec<usize>,
    prior_mean: Vec<f64>,
    prior_var: Vec<f64>,
    maps: Vec<FeatureMap>,
    schedule: Option<DiscreteSchedule>,
    realization: Realization,
}

impl AnalyticGaussianBackbone {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        prior_mean: Vec<f64>,
        prior_var: Vec<f64>,
        maps: Vec<FeatureMap>,
    ) -> Result<Self> {
        let d: usize = shape.iter().product();
        if d == 0 {
            return Err(Error::config("analytic backbone needs a nonempty input shape"));
        }
        if prior_mean.len() != d || prior_var.len() != d {
            return Err(Error::config(format!("prior must have {d} entries")));
        }
        if let Some(v) = prior_var.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::config(format!("prior variance {v} must be positive")));
        }
        for m in &maps {
            if m.weight.len() != m.rows() * d {
                return Err(Error::config(format!("feature map {} expects {d} inputs", m.hook)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = maps.iter().find(|m| !seen.insert(&m.hook.name)) {
            return Err(Error::config(format!("duplicate hook {}", dup.hook)));
        }
        Ok(Self {
            name: name.into(),
            shape,
            prior_mean,
            prior_var,
            maps,
            schedule: None,
            realization: Realization::Ve,
        })
    }

    pub fn from_config(cfg: &AnalyticConfig) -> Result<Self> {
        let d: usize = cfg.shape.iter().product();
        let maps = cfg
            .hooks
            .iter()
            .map(|h| FeatureMap::from_config(h, d))
            .collect::<Result<Vec<_>>>()?;
        let mut backbone = Self::new(
            cfg.name.clone(),
            cfg.shape.clone(),
            cfg.prior_mean.resolve(d)?,
            cfg.prior_var.resolve(d)?,
            maps,
        )?;
        backbone.schedule = cfg.schedule.as_ref().map(|s| s.resolve()).transpose()?;
        backbone.realization = cfg.realization;
        Ok(backbone)
    }

    pub fn with_schedule(mut self, schedule: Option<DiscreteSchedule>) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_realization(mut self, realization: Realization) -> Self {
        self.realization = realization;
        self
    }

    pub fn prior_var(&self) -> &[f64] {
        &self.prior_var
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    fn map(&self, hook: &HookId) -> Result<&FeatureMap> {
        self.maps
            .iter()
            .find(|m| &m.hook == hook)
            .ok_or_else(|| unknown_hook(&self.name, hook))
    }

    /// Exact posterior mean of `x₀` given `x_λ`.
    pub fn posterior_mean(&self, x: &Tensor, a: f64, b: f64) -> Tensor {
        let data = x
            .data()
            .iter()
            .zip(self.prior_mean.iter().zip(&self.prior_var))
            .map(|(&xv, (&m, &s))| m + a * s / (a * a * s + b * b) * (xv - a * m))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

impl Backbone for AnalyticGaussianBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn schedule(&self) -> Option<&DiscreteSchedule> {
        self.schedule.as_ref()
    }

    fn realization(&self) -> Realization {
        self.realization
    }

    fn candidate_hooks(&self) -> Vec<HookId> {
        self.maps.iter().map(|m| m.hook.clone()).collect()
    }

    fn evaluate(&self, query: &Query<'_>, hooks: &[HookId]) -> Result<BackboneOutput> {
        let x = query.input;
        if x.shape() != self.shape.as_slice() {
            return Err(Error::domain(format!(
                "input shape {:?}, backbone expects {:?}",
                x.shape(),
                self.shape
            )));
        }
        let level = query.level;
        let xhat0 = self.posterior_mean(x, level.a, level.b);
        let epshat = if level.b > 0.0 {
            recover_epshat(x, &xhat0, level)?
        } else {
            Tensor::zeros(x.shape())
        };
        let mut activations = BTreeMap::new();
        for hook in hooks {
            activations.insert(hook.clone(), self.map(hook)?.apply(x.data()));
        }
        Ok(BackboneOutput {
            xhat0,
            epshat,
            activations,
        })
    }

    fn dry_run_shapes(&self) -> Result<Vec<(HookId, Vec<usize>)>> {
        Ok(self
            .maps
            .iter()
            .map(|m| (m.hook.clone(), m.layout.clone()))
            .collect())
    }

    fn affine_jacobian_trace(&self, hook: &HookId) -> Option<f64> {
        let map = self.maps.iter().find(|m| &m.hook == hook)?;
        let pointwise = map.layout.len() == 3 && map.layout[1] == 1 && map.layout[2] == 1;
        pointwise.then(|| map.weight.iter().map(|w| w * w).sum())
    }
}

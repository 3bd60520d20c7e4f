//! Strictly parsed run configuration.
//!
//! Every table rejects unknown keys; a typo in a protocol knob is an error,
//! never a silently ignored setting. [`CONFIG_KEYS`] is the reference printed
//! by the CLI's `--help`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::dump::DumpConfig;
use crate::backbone::{
    AnalyticGaussianBackbone, Backbone, ReplayBackbone, TinyUNet, TinyUNetConfig,
};
use crate::canonical::{DiscreteSchedule, GridConfig, Realization};
use crate::error::{Error, Result};
use crate::harness::dataset::DatasetSpec;
use crate::harness::diagnostics::DiagnosticsConfig;
use crate::harness::method::MethodConfig;
use crate::rng::{purpose, NoiseSource};

/// A vector given as a scalar, explicit values, or a seeded generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Values(Vec<f64>),
    Ramp(RampSpec),
    Uniform(UniformSpec),
    Normal(NormalSpec),
}

/// Linear ramp over the flattened index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSpec {
    pub ramp: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformSpec {
    pub uniform: [f64; 2],
    pub seed: u64,
}

/// `normal = [mean, std]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalSpec {
    pub normal: [f64; 2],
    pub seed: u64,
}

impl VectorSpec {
    pub fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        Ok(match self {
            VectorSpec::Scalar(v) => vec![*v; n],
            VectorSpec::Values(values) => {
                if values.len() != n {
                    return Err(Error::config(format!(
                        "vector has {} entries, expected {n}",
                        values.len()
                    )));
                }
                values.clone()
            }
            VectorSpec::Ramp(RampSpec { ramp: [lo, hi] }) => (0..n)
                .map(|i| {
                    if n == 1 {
                        *lo
                    } else {
                        lo + (hi - lo) * i as f64 / (n - 1) as f64
                    }
                })
                .collect(),
            VectorSpec::Uniform(UniformSpec {
                uniform: [lo, hi],
                seed,
            }) => {
                let mut rng = NoiseSource::new(*seed).rng(&[purpose::DATA, 0x756e_6966]);
                (0..n).map(|_| rng.random_range(*lo..=*hi)).collect()
            }
            VectorSpec::Normal(NormalSpec {
                normal: [mean, std],
                seed,
            }) => {
                let mut rng = NoiseSource::new(*seed).rng(&[purpose::DATA, 0x6e6f_726d]);
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mean + std * z
                    })
                    .collect()
            }
        })
    }
}

/// Discrete schedule source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    LinearBeta(LinearBetaSpec),
    File(ScheduleFile),
    Lambdas(LambdaList),
    AlphaBar(AlphaBarList),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearBetaSpec {
    pub linear_beta: [f64; 2],
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaList {
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaBarList {
    pub alpha_bar: Vec<f64>,
}

impl ScheduleSpec {
    pub fn resolve(&self) -> Result<DiscreteSchedule> {
        match self {
            ScheduleSpec::LinearBeta(LinearBetaSpec {
                linear_beta: [start, end],
                steps,
            }) => DiscreteSchedule::linear_beta(*steps, *start, *end),
            ScheduleSpec::File(ScheduleFile { file }) => {
                DiscreteSchedule::parse(&std::fs::read_to_string(file)?)
            }
            ScheduleSpec::Lambdas(LambdaList { lambdas }) => DiscreteSchedule::from_lambdas(lambdas),
            ScheduleSpec::AlphaBar(AlphaBarList { alpha_bar }) => {
                DiscreteSchedule::new(alpha_bar.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapInit {
    /// Gaussian entries with variance `scale²/d`.
    Random,
    /// `scale·I`; needs `channels·spatial = d`.
    Identity,
    /// Rows picking the listed input coordinates, times `scale`.
    Select,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapConfig {
    /// `<region>.<stage>[.suffix]`.
    pub name: String,
    pub channels: usize,
    /// Spatial layout of each channel; `[]` emits a flat vector.
    #[serde(default = "default_spatial")]
    pub spatial: Vec<usize>,
    #[serde(default = "default_init")]
    pub init: MapInit,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
    #[serde(default)]
    pub offset: f64,
}

fn default_spatial() -> Vec<usize> {
    vec![1, 1]
}

fn default_init() -> MapInit {
    MapInit::Random
}

fn one() -> f64 {
    1.0
}

fn zero_spec() -> VectorSpec {
    VectorSpec::Scalar(0.0)
}

fn one_spec() -> VectorSpec {
    VectorSpec::Scalar(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticConfig {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "zero_spec")]
    pub prior_mean: VectorSpec,
    #[serde(default = "one_spec")]
    pub prior_var: VectorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub realization: Realization,
    pub hooks: Vec<FeatureMapConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub name: String,
    pub path: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub realization: Realization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneConfig {
    Analytic(AnalyticConfig),
    Tinyunet(TinyUNetConfig),
    Replay(ReplayConfig),
}

impl BackboneConfig {
    pub fn name(&self) -> &str {
        match self {
            BackboneConfig::Analytic(c) => &c.name,
            BackboneConfig::Tinyunet(c) => &c.name,
            BackboneConfig::Replay(c) => &c.name,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Backbone>> {
        Ok(match self {
            BackboneConfig::Analytic(c) => Box::new(AnalyticGaussianBackbone::from_config(c)?),
            BackboneConfig::Tinyunet(c) => Box::new(TinyUNet::new(c.clone())?),
            BackboneConfig::Replay(c) => {
                let schedule = c.schedule.as_ref().map(|s| s.resolve()).transpose()?;
                Box::new(ReplayBackbone::open(
                    &c.name,
                    Path::new(&c.path),
                    c.shape.clone(),
                    schedule,
                    c.realization,
                )?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Seed of the synthetic datasets; fixed across evaluation seeds.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub grid: GridConfig,
    pub backbones: Vec<BackboneConfig>,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump: Option<DumpConfig>,
}

fn default_output_dir() -> String {
    "out".into()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.backbones.is_empty() {
            return Err(Error::config("at least one backbone is required"));
        }
        unique_names("backbone", self.backbones.iter().map(|b| b.name()))?;
        unique_names("dataset", self.datasets.iter().map(|d| d.name.as_str()))?;
        let labels: Vec<String> = self.methods.iter().map(|m| m.label()).collect();
        unique_names("method", labels.iter().map(|s| s.as_str()))?;
        for d in &self.datasets {
            d.validate()?;
        }
        for m in &self.methods {
            m.validate()?;
        }
        Ok(())
    }

    /// Keeps only the named methods, failing on names that do not resolve.
    pub fn restrict_methods(&mut self, names: &[String]) -> Result<()> {
        for name in names {
            if !self.methods.iter().any(|m| &m.label() == name) {
                return Err(Error::config(format!("unknown method {name:?}")));
            }
        }
        self.methods.retain(|m| names.contains(&m.label()));
        Ok(())
    }
}

fn unique_names<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(Error::config(format!("duplicate {what} name {name:?}")));
        }
    }
    Ok(())
}

/// Every accepted configuration key, as printed by `mbe --help`.
pub const CONFIG_KEYS: &str = "\
CONFIGURATION KEYS (TOML; unknown keys are rejected)
  name                 run name
  seeds                evaluation seeds (corruption noise, hook probes)
  data_seed            seed of the synthetic datasets (default 0)
  output_dir           report directory (default \"out\")

  [grid]               shared canonical levels for multilevel baselines
    lambda_min, lambda_max   logSNR range
    k_grid               candidate grid resolution
    k_c                  number of selected levels
    unique               drop repeated timestep matches (default true)
    realization          ve | vp (default ve; a continuous backbone's own realization wins)

  [[backbones]]
    kind                 analytic | tinyunet | replay
    name                 unique backbone name
    shape                input shape [C, H, W]
    realization          ve | vp
    schedule             discrete schedule, one of:
                           { linear_beta = [start, end], steps = N }
                           { file = \"path\" }  (one alpha_bar per line)
                           { lambdas = [...] } | { alpha_bar = [...] }
    analytic:  prior_mean, prior_var (vector spec), hooks
      [[backbones.hooks]] name, channels, spatial, init (random|identity|select),
                        scale, seed, indices, offset
    tinyunet:  seed, width, planted_noise_hook
    replay:    path (feature dump file)

  vector spec          scalar | [values] | { ramp = [lo, hi] }
                       | { uniform = [lo, hi], seed = S } | { normal = [mean, std], seed = S }

  [[methods]]
    kind                 cfs | msma | diffpath | ddpm_ood | gepc | stub
    name                 report label (defaults to a kind-derived label)
    cfs:       levels, mode (dec1x1 | ed1x2 | <Kc>x<Ks>), head (diagonal | shrinkage
               | knn | gmm_light), gamma, k, components, iterations, floor,
               standardize, shortlist_size, mc_fit, mc_test, probe_images,
               proxy_repeats, d_weighted
    msma:      k_c, head (diag_gaussian | gmm | knn), k, components, standardize
    diffpath:  k_c, variant (d1 | d6), reduction (mean | abs_mean | sq_mean),
               head (kde1d | diag_gaussian | gmm | knn), standardize
    ddpm_ood:  k_c, starts, agg (mean | median | sum), normalization (mean_std | median_mad)
    gepc:      k_c, group (identity | hflip | vflip | rot180 | rot90 | transpose),
               calibrator (zscore | kde1d), level_agg (mean | weighted | trimmed),
               weights, trim
    stub:      declared_forwards, actual_forwards (protocol-check stub)

  [[datasets]]
    name, role (id | ood), n_fit, n_test, shape
    kind                 gaussian_mixture | planted_shift | dump_replay
    gaussian_mixture:    [[datasets.components]] weight, mean, std (vector specs)
    planted_shift:       components (base distribution), shift = { magnitude, dims }
                         | { scaled = c, dims } (c times the base std) | { vector = [...] }
    dump_replay:         placeholders whose ids key a replay backbone

  [diagnostics]
    enabled              must be true for `mbe diag`
    backbone             backbone to probe (default: first)
    id                   ID dataset name
    ood                  planted-shift OOD dataset names
    hooks                probe hooks (default: every admissible hook)
    levels               probe levels (logSNR)
    n_fit, n_test        caps on the dataset splits used by the probes
    repeats              corruption repeats of the content ratio (default 4)
    proxy_images         ID-fit images of the content ratio (default 64)
    [diagnostics.low_noise]  hook (affine, pointwise), lambdas, draws (default 20000),
                             image (ID-fit index, default 0)
    [diagnostics.mismatch]   anchor (schedule timestep), offsets (logSNR), hooks

  [dump]
    backbone             backbone to record (default: first)
";

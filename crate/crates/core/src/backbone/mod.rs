//! Frozen backbones behind one adapter interface.
//!
//! A backbone maps a corrupted input at a canonical level to `x̂₀`, `ε̂` and
//! any requested hooked activations. Methods never call
//! [`Backbone::evaluate`] directly; they go through a [`Probe`], which counts
//! every pass as one logical forward.

mod analytic;
pub mod dump;
mod replay;
mod unet;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use analytic::{AnalyticGaussianBackbone, FeatureMap};
pub use replay::{replay_open, RecordingBackbone, ReplayBackbone};
pub use unet::{TinyUNet, TinyUNetConfig};

use crate::canonical::{CanonicalLevel, DiscreteSchedule, Realization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Encoder,
    Middle,
    Decoder,
}

impl Region {
    pub fn as_str(&self) -> &'static str {
        match self {
            Region::Encoder => "encoder",
            Region::Middle => "middle",
            Region::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "encoder" => Some(Region::Encoder),
            "middle" => Some(Region::Middle),
            "decoder" => Some(Region::Decoder),
            _ => None,
        }
    }
}

/// Identifier of one hookable block output.
///
/// Ordering is structural: region, then stage, then name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookId {
    pub region: Region,
    pub stage: usize,
    pub name: String,
}

impl HookId {
    /// Hook named `<region>.<stage>`.
    pub fn new(region: Region, stage: usize) -> Self {
        Self {
            region,
            stage,
            name: format!("{}.{stage}", region.as_str()),
        }
    }

    pub fn named(region: Region, stage: usize, name: impl Into<String>) -> Self {
        Self {
            region,
            stage,
            name: name.into(),
        }
    }

    /// Parses `<region>.<stage>[.suffix]`; a non-numeric second segment
    /// means stage 0.
    pub fn parse(name: &str) -> Result<Self> {
        let mut parts = name.split('.');
        let region = parts
            .next()
            .and_then(Region::parse)
            .ok_or_else(|| Error::config(format!("hook {name:?} has no structural region")))?;
        let stage = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
        Ok(Self::named(region, stage, name))
    }
}

impl fmt::Display for HookId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub xhat0: Tensor,
    pub epshat: Tensor,
    pub activations: BTreeMap<HookId, Tensor>,
}

impl BackboneOutput {
    pub fn activation(&self, hook: &HookId) -> Result<&Tensor> {
        self.activations
            .get(hook)
            .ok_or_else(|| Error::Lookup(format!("activation {hook} was not captured")))
    }
}

/// One forward request.
///
/// `key` identifies the stored pass when `input` is the canonical corruption
/// of a known image with a known noise draw; replays can only serve keyed
/// queries.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub input: &'a Tensor,
    pub level: &'a CanonicalLevel,
    pub key: Option<u64>,
}

impl<'a> Query<'a> {
    pub fn new(input: &'a Tensor, level: &'a CanonicalLevel) -> Self {
        Self {
            input,
            level,
            key: None,
        }
    }

    pub fn keyed(input: &'a Tensor, level: &'a CanonicalLevel, key: u64) -> Self {
        Self {
            input,
            level,
            key: Some(key),
        }
    }
}

pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    fn input_shape(&self) -> &[usize];

    /// Native discrete schedule, if the backbone is timestep-indexed.
    fn schedule(&self) -> Option<&DiscreteSchedule> {
        None
    }

    /// Coefficient family for continuous levels.
    fn realization(&self) -> Realization {
        Realization::Ve
    }

    /// Every hook the backbone can emit, admissible or not.
    fn candidate_hooks(&self) -> Vec<HookId>;

    /// One uncounted pass. Use [`Probe::forward`] from method code.
    fn evaluate(&self, query: &Query<'_>, hooks: &[HookId]) -> Result<BackboneOutput>;

    /// Output shape of every candidate hook.
    fn dry_run_shapes(&self) -> Result<Vec<(HookId, Vec<usize>)>> {
        let hooks = self.candidate_hooks();
        let input = Tensor::zeros(self.input_shape());
        let level = CanonicalLevel::from_logsnr(0.0, self.realization())?;
        let out = self.evaluate(&Query::new(&input, &level), &hooks)?;
        Ok(hooks
            .into_iter()
            .filter_map(|h| out.activations.get(&h).map(|t| (h, t.shape().to_vec())))
            .collect())
    }

    /// `tr(JJᵀ)` of the hook's pooled descriptor when that descriptor is an
    /// affine function of the corrupted input.
    fn affine_jacobian_trace(&self, _hook: &HookId) -> Option<f64> {
        None
    }
}

/// Hooks whose dry-run output is a `channels × height × width` map, sorted
/// structurally.
pub fn list_admissible_hooks(backbone: &dyn Backbone) -> Result<Vec<HookId>> {
    let mut hooks: Vec<HookId> = backbone
        .dry_run_shapes()?
        .into_iter()
        .filter(|(_, shape)| shape.len() == 3 && shape.iter().all(|&d| d > 0))
        .map(|(h, _)| h)
        .collect();
    hooks.sort();
    Ok(hooks)
}

/// `(x − a·x̂₀)/b`.
pub fn recover_epshat(x: &Tensor, xhat0: &Tensor, level: &CanonicalLevel) -> Result<Tensor> {
    if !(level.b > 0.0) {
        return Err(Error::SingularLevel(format!(
            "cannot recover ε̂ at b = {}",
            level.b
        )));
    }
    let (a, b) = (level.a, level.b);
    x.zip_map(xhat0, |xv, x0| (xv - a * x0) / b)
}

/// Logical cost counters for one scoring run.
#[derive(Debug, Default)]
pub struct ForwardCounter {
    forwards: AtomicU64,
    jacobians: AtomicU64,
}

impl ForwardCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forwards(&self) -> u64 {
        self.forwards.load(Ordering::SeqCst)
    }

    pub fn jacobians(&self) -> u64 {
        self.jacobians.load(Ordering::SeqCst)
    }

    pub(crate) fn add_forward(&self) {
        self.forwards.fetch_add(1, Ordering::SeqCst);
    }
}

/// Counted access to a backbone.
#[derive(Clone, Copy)]
pub struct Probe<'a> {
    backbone: &'a dyn Backbone,
    counter: &'a ForwardCounter,
}

impl<'a> Probe<'a> {
    pub fn new(backbone: &'a dyn Backbone, counter: &'a ForwardCounter) -> Self {
        Self { backbone, counter }
    }

    pub fn backbone(&self) -> &'a dyn Backbone {
        self.backbone
    }

    pub fn counter(&self) -> &'a ForwardCounter {
        self.counter
    }

    /// Counts one forward and captures every requested hook from that pass.
    ///
    /// Activations are carried at single precision, the precision feature
    /// dumps store them at.
    pub fn forward(&self, query: &Query<'_>, hooks: &[HookId]) -> Result<BackboneOutput> {
        self.counter.add_forward();
        let mut out = self.backbone.evaluate(query, hooks)?;
        for (hook, act) in out.activations.iter_mut() {
            act.quantize_f32();
            if !act.is_finite() {
                return Err(Error::Numerical(format!("non-finite activation at {hook}")));
            }
        }
        if !out.xhat0.is_finite() || !out.epshat.is_finite() {
            return Err(Error::Numerical("non-finite backbone output".into()));
        }
        Ok(out)
    }
}

pub(crate) fn unknown_hook(backbone: &str, hook: &HookId) -> Error {
    Error::config(format!("backbone {backbone} has no hook {hook}"))
}

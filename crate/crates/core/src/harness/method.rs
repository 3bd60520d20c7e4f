//! Method configurations and their uniform plan / extract / fit / score life
//! cycle as seen by the runner.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneOutput, HookId, Probe, Query};
use crate::baselines::{
    ddpm_ood, diffpath_features, gepc_features, method_grid, msma_features, DdpmOodConfig, DdpmOodStats,
    DiffPathConfig, GepcCalibrators, GepcConfig, MsmaConfig,
};
use crate::canonical::{corrupt, CanonicalLevel, GridConfig, LevelGrid};
use crate::cfs::{extract_descriptors, CfsConfig, CfsDetector, HookSelection};
use crate::density::{DensityHead, DensityParams};
use crate::error::{Error, Result};
use crate::harness::dataset::Split;
use crate::rng::{purpose, NoiseSource};
use crate::Image;

/// Protocol-check method spending `actual_forwards` while declaring
/// `declared_forwards`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub declared_forwards: u64,
    pub actual_forwards: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodConfig {
    Cfs(CfsConfig),
    Msma(MsmaConfig),
    Diffpath(DiffPathConfig),
    DdpmOod(DdpmOodConfig),
    Gepc(GepcConfig),
    Stub(StubConfig),
}

impl MethodConfig {
    pub fn label(&self) -> String {
        let named = |name: &Option<String>, default: String| name.clone().unwrap_or(default);
        match self {
            MethodConfig::Cfs(c) => c.label(),
            MethodConfig::Msma(c) => named(&c.name, "msma".into()),
            MethodConfig::Diffpath(c) => named(
                &c.name,
                match c.variant {
                    crate::baselines::PathVariant::D1 => "diffpath_1d".into(),
                    crate::baselines::PathVariant::D6 => "diffpath_6d".into(),
                },
            ),
            MethodConfig::DdpmOod(c) => named(&c.name, "ddpm_ood".into()),
            MethodConfig::Gepc(c) => named(&c.name, "gepc".into()),
            MethodConfig::Stub(c) => named(&c.name, "stub".into()),
        }
    }

    pub fn is_cfs(&self) -> bool {
        matches!(self, MethodConfig::Cfs(_))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |k: usize, what: &str| {
            if k == 0 {
                Err(Error::config(format!("{what}: k_c must be positive")))
            } else {
                Ok(())
            }
        };
        match self {
            MethodConfig::Cfs(c) => c.validate(),
            MethodConfig::Msma(c) => positive(c.k_c, "msma"),
            MethodConfig::Diffpath(c) => {
                positive(c.k_c, "diffpath")?;
                if c.variant == crate::baselines::PathVariant::D1 && c.k_c < 2 {
                    return Err(Error::config("diffpath d1 needs k_c ≥ 2"));
                }
                Ok(())
            }
            MethodConfig::DdpmOod(c) => {
                positive(c.k_c, "ddpm_ood")?;
                ddpm_ood::start_indices(c.k_c, c.starts).map(|_| ())
            }
            MethodConfig::Gepc(c) => c.validate(),
            MethodConfig::Stub(_) => Ok(()),
        }
    }

    /// Realizes levels and hooks for one backbone. CFS selects its hooks on
    /// the ID-fit images; every other method ignores them.
    pub fn plan(&self, probe: &Probe<'_>, grid: &GridConfig, fit: &[Image], seed: u64) -> Result<MethodPlan> {
        let bb = probe.backbone();
        let (kind, declared) = match self {
            MethodConfig::Cfs(c) => {
                let (det, selection) = CfsDetector::plan(probe, c, fit, seed)?;
                let declared = det.declared_forwards();
                (PlanKind::Cfs(Box::new(det), selection), declared)
            }
            MethodConfig::Msma(c) => {
                let g = method_grid(bb, grid, c.k_c)?;
                let n = g.len() as u64;
                (PlanKind::Grid(g), n)
            }
            MethodConfig::Diffpath(c) => {
                let g = method_grid(bb, grid, c.k_c)?;
                let n = g.len() as u64;
                (PlanKind::Grid(g), n)
            }
            MethodConfig::DdpmOod(c) => {
                let g = method_grid(bb, grid, c.k_c)?;
                let starts = ddpm_ood::start_indices(g.len(), c.starts)?;
                let n = ddpm_ood::declared_forwards(g.len(), c.starts)?;
                (PlanKind::Starts(g, starts), n)
            }
            MethodConfig::Gepc(c) => {
                let g = method_grid(bb, grid, c.k_c)?;
                let n = c.declared_forwards(g.len());
                (PlanKind::Grid(g), n)
            }
            MethodConfig::Stub(c) => (PlanKind::Stub, c.declared_forwards),
        };
        let fingerprint = format!("{}|{}", self.label(), kind.describe());
        Ok(MethodPlan {
            kind,
            declared_forwards: declared,
            declared_jacobians: 0,
            fingerprint,
        })
    }

    /// Features of one image: one vector per corruption draw for CFS, a
    /// single vector otherwise.
    pub fn extract(
        &self,
        plan: &MethodPlan,
        probe: &Probe<'_>,
        image: &Image,
        split: Split,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        match (self, &plan.kind) {
            (MethodConfig::Cfs(c), PlanKind::Cfs(det, _)) => {
                let draws = match split {
                    Split::Fit => c.mc_fit,
                    Split::Test => c.mc_test,
                };
                extract_descriptors(probe, det.grid(), det.hooks(), image, draws, seed)
            }
            (MethodConfig::Msma(_), PlanKind::Grid(g)) => Ok(vec![msma_features(probe, g, image, seed)?]),
            (MethodConfig::Diffpath(c), PlanKind::Grid(g)) => {
                Ok(vec![diffpath_features(probe, g, image, seed, c.reduction, c.variant)?])
            }
            (MethodConfig::DdpmOod(_), PlanKind::Starts(g, starts)) => {
                Ok(vec![ddpm_ood::ddpm_ood_reconstruction(probe, g, starts, image, seed)?])
            }
            (MethodConfig::Gepc(c), PlanKind::Grid(g)) => {
                Ok(vec![gepc_features(probe, g, &c.group, image, seed)?])
            }
            (MethodConfig::Stub(c), PlanKind::Stub) => Ok(vec![vec![stub_feature(probe, image, seed, c.actual_forwards)?]]),
            _ => Err(Error::State(format!("plan does not belong to method {}", self.label()))),
        }
    }

    /// Fits the ID-only scorer on extracted fit features.
    pub fn fit(&self, plan: &MethodPlan, probe: &Probe<'_>, bank: &[Vec<Vec<f64>>], seed: u64) -> Result<Scorer> {
        let flat = || -> Vec<Vec<f64>> { bank.iter().flat_map(|d| d.iter().cloned()).collect() };
        Ok(match (self, &plan.kind) {
            (MethodConfig::Cfs(_), PlanKind::Cfs(det, _)) => {
                let mut det = (**det).clone();
                let dims = det.slot_dims(probe)?;
                det.fit_bank(&flat(), &dims)?;
                Scorer::Cfs(Box::new(det))
            }
            (MethodConfig::Msma(c), _) => {
                let params = DensityParams {
                    k: c.k,
                    components: c.components,
                    standardize: c.standardize,
                    seed,
                    ..DensityParams::default()
                };
                Scorer::Density(DensityHead::fit(&flat(), c.head, &params)?)
            }
            (MethodConfig::Diffpath(c), _) => {
                let params = DensityParams {
                    standardize: c.standardize,
                    seed,
                    ..DensityParams::default()
                };
                Scorer::Density(DensityHead::fit(&flat(), c.head(), &params)?)
            }
            (MethodConfig::DdpmOod(c), _) => {
                Scorer::DdpmOod(DdpmOodStats::fit(&flat(), c.normalization, c.agg)?)
            }
            (MethodConfig::Gepc(c), PlanKind::Grid(g)) => {
                Scorer::Gepc(GepcCalibrators::fit(&flat(), g.len(), c)?)
            }
            (MethodConfig::Stub(_), _) => Scorer::Identity,
            _ => return Err(Error::State(format!("plan does not belong to method {}", self.label()))),
        })
    }
}

/// Stub forwards at logSNR 0: the first is keyed, the feature is the mean of
/// the last `x̂₀`.
fn stub_feature(probe: &Probe<'_>, image: &Image, seed: u64, forwards: u64) -> Result<f64> {
    let level = CanonicalLevel::from_logsnr(0.0, probe.backbone().realization())?;
    let noise = NoiseSource::new(seed);
    let key = [purpose::CFS, image.id, u64::MAX];
    let x = corrupt(&image.x0, &level, &noise.normal_tensor(&key, image.x0.shape()))?;
    let mut last: Option<BackboneOutput> = None;
    for i in 0..forwards {
        let q = if i == 0 {
            Query::keyed(&x, &level, noise.query_key(&key))
        } else {
            Query::new(&x, &level)
        };
        last = Some(probe.forward(&q, &[])?);
    }
    Ok(last.map_or(0.0, |o| o.xhat0.mean()))
}

#[derive(Debug, Clone)]
pub enum PlanKind {
    Cfs(Box<CfsDetector>, HookSelection),
    Grid(LevelGrid),
    Starts(LevelGrid, Vec<usize>),
    Stub,
}

impl PlanKind {
    fn describe(&self) -> String {
        let lambdas = |g: &LevelGrid| {
            g.lambdas()
                .iter()
                .map(|l| format!("{l:e}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            PlanKind::Cfs(det, _) => {
                let hooks: Vec<String> = det.hooks().iter().map(HookId::to_string).collect();
                format!("{}|{}", lambdas(det.grid()), hooks.join(","))
            }
            PlanKind::Grid(g) => lambdas(g),
            PlanKind::Starts(g, s) => format!("{}|{s:?}", lambdas(g)),
            PlanKind::Stub => String::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodPlan {
    pub kind: PlanKind,
    pub declared_forwards: u64,
    pub declared_jacobians: u64,
    /// Identifies the extracted features; equal fingerprints share caches.
    pub fingerprint: String,
}

impl MethodPlan {
    pub fn hook_selection(&self) -> Option<&HookSelection> {
        match &self.kind {
            PlanKind::Cfs(_, s) => Some(s),
            _ => None,
        }
    }

    pub fn grid(&self) -> Option<&LevelGrid> {
        match &self.kind {
            PlanKind::Cfs(det, _) => Some(det.grid()),
            PlanKind::Grid(g) | PlanKind::Starts(g, _) => Some(g),
            PlanKind::Stub => None,
        }
    }
}

/// A fitted OOD-high scorer over extracted features.
#[derive(Debug, Clone)]
pub enum Scorer {
    Cfs(Box<CfsDetector>),
    Density(DensityHead),
    DdpmOod(DdpmOodStats),
    Gepc(GepcCalibrators),
    Identity,
}

impl Scorer {
    pub fn score(&self, features: &[Vec<f64>]) -> Result<f64> {
        let single = || {
            features
                .first()
                .ok_or_else(|| Error::domain("no features to score"))
        };
        match self {
            Scorer::Cfs(det) => det.score_descriptors(features),
            Scorer::Density(h) => h.score(single()?),
            Scorer::DdpmOod(s) => s.score(single()?),
            Scorer::Gepc(c) => c.score(single()?),
            Scorer::Identity => Ok(single()?[0]),
        }
    }
}

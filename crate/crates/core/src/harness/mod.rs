//! The backbone-equated protocol runner.
//!
//! For every seed, backbone, method and ID dataset the runner plans the
//! method on the ID-fit split, extracts features for the ID-fit and every
//! test split, fits the ID-only scorer and scores ID-test against each other
//! pool dataset. Every scored image is counted individually and must spend
//! exactly the method's declared budget.

pub mod dataset;
pub mod diagnostics;
pub mod method;
pub mod replay;
pub mod report;
pub mod svg;

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::backbone::{Backbone, ForwardCounter, Probe};
use crate::cfs::HookSelection;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{aupr, auroc, fpr_at_tpr95};
use crate::Image;
use dataset::{make_dataset, Dataset, Role, Split};
use method::{MethodConfig, MethodPlan};

/// Environment variable selecting the worker count.
pub const WORKERS_ENV: &str = "MBE_WORKERS";

/// Worker count from [`WORKERS_ENV`], defaulting to the available parallelism.
pub fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a pool of [`workers`] threads.
pub fn with_workers<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers())
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub id: String,
    pub ood: String,
    pub method: String,
    pub backbone: String,
    pub seed: u64,
    pub auroc: f64,
    pub fpr95: f64,
    pub aupr: f64,
    /// Forwards per scored image, as counted.
    pub forwards: u64,
    pub jacobians: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedAggregate {
    pub seed: u64,
    pub avg_auroc: f64,
    pub avg_worst_auroc: f64,
    pub avg_fpr95: f64,
    pub avg_aupr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub backbone: String,
    pub per_seed: Vec<SeedAggregate>,
    pub avg_auroc: f64,
    pub avg_auroc_std: f64,
    pub avg_worst_auroc: f64,
    pub avg_worst_auroc_std: f64,
    pub avg_fpr95: f64,
    pub avg_aupr: f64,
    pub forwards: u64,
    pub jacobians: u64,
}

/// Hooks chosen by a CFS plan.
#[derive(Debug, Clone)]
pub struct HookReport {
    pub seed: u64,
    pub backbone: String,
    pub method: String,
    pub id: String,
    pub selection: HookSelection,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub rows: Vec<PairRow>,
    pub aggregates: Vec<Aggregate>,
    pub seeds: Vec<u64>,
    pub hooks: Vec<HookReport>,
    pub config: RunConfig,
    pub version: &'static str,
}

/// ID→OOD pairs: each ID against every other dataset of the pool.
pub fn benchmark_pairs(datasets: &[(String, Role)]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, (_, role)) in datasets.iter().enumerate() {
        if *role != Role::Id {
            continue;
        }
        pairs.extend((0..datasets.len()).filter(|&o| o != i).map(|o| (i, o)));
    }
    pairs
}

/// Mean over pairs and mean over IDs of the per-ID minimum.
pub fn avg_and_worst(rows: &[(&str, f64)]) -> (f64, f64) {
    if rows.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let avg = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for &(id, v) in rows {
        match worst.iter_mut().find(|w| w.0 == id) {
            Some(w) => w.1 = w.1.min(v),
            None => worst.push((id, v)),
        }
    }
    let avg_worst = worst.iter().map(|w| w.1).sum::<f64>() / worst.len() as f64;
    (avg, avg_worst)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

type Features = Arc<Vec<Vec<Vec<f64>>>>;

struct Extraction<'a> {
    probe_backbone: &'a dyn Backbone,
    method: &'a MethodConfig,
    plan: &'a MethodPlan,
    backbone_name: &'a str,
    seed: u64,
}

impl Extraction<'_> {
    /// Features of every image, checking the per-image budget on test splits.
    fn run(&self, images: &[Image], split: Split) -> Result<Vec<Vec<Vec<f64>>>> {
        images
            .par_iter()
            .map(|img| {
                let counter = ForwardCounter::new();
                let probe = Probe::new(self.probe_backbone, &counter);
                let f = self.method.extract(self.plan, &probe, img, split, self.seed)?;
                if split == Split::Test
                    && (counter.forwards() != self.plan.declared_forwards
                        || counter.jacobians() != self.plan.declared_jacobians)
                {
                    return Err(Error::Protocol(format!(
                        "{} on {} spent {}F/{}J on image {:#x}, declared {}F/{}J",
                        self.method.label(),
                        self.backbone_name,
                        counter.forwards(),
                        counter.jacobians(),
                        img.id,
                        self.plan.declared_forwards,
                        self.plan.declared_jacobians
                    )));
                }
                Ok(f)
            })
            .collect()
    }
}

/// Builds the configured backbones and runs the benchmark on them.
pub fn run_benchmark(config: &RunConfig) -> Result<BenchmarkReport> {
    let built: Vec<Box<dyn Backbone>> = config.backbones.iter().map(|b| b.build()).collect::<Result<_>>()?;
    let refs: Vec<&dyn Backbone> = built.iter().map(|b| b.as_ref()).collect();
    run_benchmark_with(config, &refs)
}

/// Runs the benchmark on already constructed backbones, one per configured
/// backbone entry.
pub fn run_benchmark_with(config: &RunConfig, backbones: &[&dyn Backbone]) -> Result<BenchmarkReport> {
    config.validate()?;
    if backbones.len() != config.backbones.len() {
        return Err(Error::config("backbone list does not match the configuration"));
    }
    let datasets: Vec<Dataset> = config
        .datasets
        .iter()
        .map(|d| make_dataset(d, config.data_seed))
        .collect::<Result<_>>()?;
    let roles: Vec<(String, Role)> = datasets.iter().map(|d| (d.name.clone(), d.role)).collect();
    let pairs = benchmark_pairs(&roles);
    if !config.methods.is_empty() && pairs.is_empty() {
        return Err(Error::config("the pool needs at least one id dataset and one other dataset"));
    }
    with_workers(|| run_inner(config, backbones, &datasets, &pairs))?
}

fn run_inner(
    config: &RunConfig,
    backbones: &[&dyn Backbone],
    datasets: &[Dataset],
    pairs: &[(usize, usize)],
) -> Result<BenchmarkReport> {
    let mut rows = Vec::new();
    let mut hooks = Vec::new();
    for &seed in &config.seeds {
        for (bb, bb_cfg) in backbones.iter().zip(&config.backbones) {
            let bb_name = bb_cfg.name();
            let mut cache: HashMap<(String, usize, Split), Features> = HashMap::new();
            for method in &config.methods {
                let label = method.label();
                for id in pairs.iter().map(|p| p.0).collect::<std::collections::BTreeSet<_>>() {
                    let plan_counter = ForwardCounter::new();
                    let plan_probe = Probe::new(*bb, &plan_counter);
                    let fit_images = &datasets[id].fit;
                    let plan = method.plan(&plan_probe, &config.grid, fit_images, seed)?;
                    log::info!(
                        "seed {seed} {bb_name} {label} id={}: {}F declared",
                        datasets[id].name,
                        plan.declared_forwards
                    );
                    if let Some(sel) = plan.hook_selection() {
                        hooks.push(HookReport {
                            seed,
                            backbone: bb_name.to_string(),
                            method: label.clone(),
                            id: datasets[id].name.clone(),
                            selection: sel.clone(),
                        });
                    }
                    let ex = Extraction {
                        probe_backbone: *bb,
                        method,
                        plan: &plan,
                        backbone_name: bb_name,
                        seed,
                    };
                    let mut features = |ds: usize, split: Split| -> Result<Features> {
                        let key = (plan.fingerprint.clone(), ds, split);
                        if let Some(f) = cache.get(&key) {
                            return Ok(f.clone());
                        }
                        let f = Arc::new(ex.run(datasets[ds].split(split), split)?);
                        cache.insert(key, f.clone());
                        Ok(f)
                    };
                    let fit = features(id, Split::Fit)?;
                    let scorer = method.fit(&plan, &plan_probe, &fit, seed)?;
                    let score_all = |f: &Features| -> Result<Vec<f64>> {
                        f.par_iter().map(|x| scorer.score(x)).collect()
                    };
                    let id_scores = score_all(&features(id, Split::Test)?)?;
                    for &(_, o) in pairs.iter().filter(|p| p.0 == id) {
                        let ood_scores = score_all(&features(o, Split::Test)?)?;
                        rows.push(PairRow {
                            id: datasets[id].name.clone(),
                            ood: datasets[o].name.clone(),
                            method: label.clone(),
                            backbone: bb_name.to_string(),
                            seed,
                            auroc: auroc(&id_scores, &ood_scores)?,
                            fpr95: fpr_at_tpr95(&id_scores, &ood_scores)?,
                            aupr: aupr(&id_scores, &ood_scores)?,
                            forwards: plan.declared_forwards,
                            jacobians: plan.declared_jacobians,
                        });
                    }
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.id, &a.ood, &a.method, &a.backbone, a.seed).cmp(&(&b.id, &b.ood, &b.method, &b.backbone, b.seed))
    });
    let aggregates = aggregate(config, &rows);
    Ok(BenchmarkReport {
        rows,
        aggregates,
        seeds: config.seeds.clone(),
        hooks,
        config: config.clone(),
        version: crate::VERSION,
    })
}

/// Per (method, backbone) aggregates in configuration order.
pub fn aggregate(config: &RunConfig, rows: &[PairRow]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for method in config.methods.iter().map(|m| m.label()) {
        for backbone in config.backbones.iter().map(|b| b.name()) {
            let mine: Vec<&PairRow> = rows
                .iter()
                .filter(|r| r.method == method && r.backbone == backbone)
                .collect();
            if mine.is_empty() {
                continue;
            }
            let per_seed: Vec<SeedAggregate> = config
                .seeds
                .iter()
                .map(|&seed| {
                    let rs: Vec<&&PairRow> = mine.iter().filter(|r| r.seed == seed).collect();
                    let au: Vec<(&str, f64)> = rs.iter().map(|r| (r.id.as_str(), r.auroc)).collect();
                    let (avg, worst) = avg_and_worst(&au);
                    let n = rs.len() as f64;
                    SeedAggregate {
                        seed,
                        avg_auroc: avg,
                        avg_worst_auroc: worst,
                        avg_fpr95: rs.iter().map(|r| r.fpr95).sum::<f64>() / n,
                        avg_aupr: rs.iter().map(|r| r.aupr).sum::<f64>() / n,
                    }
                })
                .collect();
            let col = |f: fn(&SeedAggregate) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
            let (avg_auroc, avg_auroc_std) = col(|s| s.avg_auroc);
            let (avg_worst_auroc, avg_worst_auroc_std) = col(|s| s.avg_worst_auroc);
            out.push(Aggregate {
                method: method.clone(),
                backbone: backbone.to_string(),
                avg_fpr95: col(|s| s.avg_fpr95).0,
                avg_aupr: col(|s| s.avg_aupr).0,
                forwards: mine[0].forwards,
                jacobians: mine[0].jacobians,
                per_seed,
                avg_auroc,
                avg_auroc_std,
                avg_worst_auroc,
                avg_worst_auroc_std,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_pairs() {
        let pool: Vec<(String, Role)> = (0..5)
            .map(|i| (format!("d{i}"), if i < 3 { Role::Id } else { Role::Ood }))
            .collect();
        let pairs = benchmark_pairs(&pool);
        assert_eq!(pairs.len(), 12);
        assert!(pairs.iter().all(|(i, o)| i != o && *i < 3));
    }

    #[test]
    fn worst_case_arithmetic() {
        let rows = [("a", 0.9), ("a", 0.8), ("b", 0.7), ("b", 0.6)];
        let (avg, worst) = avg_and_worst(&rows);
        assert!((avg - 0.75).abs() < 1e-15);
        assert!((worst - 0.7).abs() < 1e-15);
    }

    #[test]
    fn seed_std_uses_sample_divisor() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}

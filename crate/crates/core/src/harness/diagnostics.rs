//! Theory diagnostics on planted-shift probes: κ̂ and R̂ against AUROC, the
//! low-noise stability probe and the logSNR mismatch sweep.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use rayon::prelude::*;
use serde_json::json;

use super::dataset::{make_dataset, Dataset};
use super::svg;
use crate::backbone::{list_admissible_hooks, Backbone, ForwardCounter, HookId, Probe};
use crate::canonical::{CanonicalLevel, LevelGrid};
use crate::cfs::{extract_descriptors, CfsConfig, CfsDetector, CfsMode};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::theory::{content_ratio, kappa_hat, low_noise_probe, mismatch_drift, spearman, LowNoiseRow, MismatchInputs, MismatchRow};
use crate::{Image, DEFAULT_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowNoiseConfig {
    /// Affine hook with a pointwise layout.
    pub hook: String,
    pub lambdas: Vec<f64>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Index of the ID-fit image used as `x₀`.
    #[serde(default)]
    pub image: usize,
}

fn default_draws() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchConfig {
    /// Timestep of the backbone schedule the sweep is anchored at.
    pub anchor: usize,
    /// logSNR offsets added to the anchor level; `0` is the exact point.
    pub offsets: Vec<f64>,
    /// Hooks of the CFS detector scored in the sweep; default all probe hooks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hooks: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Backbone to probe; default the first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    /// ID dataset name.
    pub id: String,
    /// Planted-shift OOD dataset names.
    pub ood: Vec<String>,
    /// Probe hooks; default every admissible hook.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hooks: Option<Vec<String>>,
    /// Probe levels (logSNR).
    pub levels: Vec<f64>,
    /// Caps on the dataset splits used by the probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_fit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    /// Corruption repeats of the content-ratio estimate.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_proxy_images")]
    pub proxy_images: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_noise: Option<LowNoiseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mismatch: Option<MismatchConfig>,
}

fn default_repeats() -> usize {
    4
}
fn default_proxy_images() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub probe_id: String,
    pub ood: String,
    pub hook: String,
    pub level: f64,
    pub kappa_hat: f64,
    /// Descriptor dimension `d`.
    pub dim: usize,
    pub ratio_hat: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub backbone: String,
    pub probes: Vec<ProbeRow>,
    /// Spearman of κ̂/d against AUROC.
    pub spearman_kappa: f64,
    /// Spearman of R̂ against AUROC.
    pub spearman_ratio: f64,
    pub low_noise_hook: Option<String>,
    pub low_noise: Vec<LowNoiseRow>,
    /// Least-squares slope of log variance on log b².
    pub low_noise_slope: Option<f64>,
    pub mismatch: Vec<MismatchRow>,
    /// Why the mismatch sweep did not run.
    pub mismatch_notice: Option<String>,
}

fn resolve_hooks(bb: &dyn Backbone, names: &Option<Vec<String>>) -> Result<Vec<HookId>> {
    match names {
        None => list_admissible_hooks(bb),
        Some(names) => {
            let known = bb.candidate_hooks();
            names
                .iter()
                .map(|n| {
                    let h = HookId::parse(n)?;
                    if known.contains(&h) {
                        Ok(h)
                    } else {
                        Err(Error::config(format!("backbone {} has no hook {n}", bb.name())))
                    }
                })
                .collect()
        }
    }
}

fn cap(images: &[Image], n: Option<usize>) -> &[Image] {
    &images[..n.map_or(images.len(), |n| n.min(images.len()))]
}

/// Least-squares slope of `ys` on `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn run_diagnostics(config: &RunConfig, seed: u64) -> Result<DiagnosticsReport> {
    super::with_workers(|| diagnostics_inner(config, seed))?
}

fn diagnostics_inner(config: &RunConfig, seed: u64) -> Result<DiagnosticsReport> {
    let diag = config
        .diagnostics
        .as_ref()
        .ok_or_else(|| Error::config("the configuration has no [diagnostics] section"))?;
    if !diag.enabled {
        return Err(Error::config(
            "diagnostics are disabled; set `enabled = true` under [diagnostics]",
        ));
    }
    let bb_cfg = match &diag.backbone {
        Some(name) => config
            .backbones
            .iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::config(format!("diagnostics backbone {name:?} is not configured")))?,
        None => &config.backbones[0],
    };
    let bb = bb_cfg.build()?;
    let bb = bb.as_ref();
    let dataset = |name: &str| -> Result<Dataset> {
        let spec = config
            .datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::config(format!("diagnostics dataset {name:?} is not configured")))?;
        make_dataset(spec, config.data_seed)
    };
    let id = dataset(&diag.id)?;
    let oods: Vec<Dataset> = diag.ood.iter().map(|n| dataset(n)).collect::<Result<_>>()?;
    if oods.is_empty() || diag.levels.is_empty() {
        return Err(Error::config("diagnostics need at least one ood dataset and one level"));
    }
    let hooks = resolve_hooks(bb, &diag.hooks)?;
    let fit = cap(&id.fit, diag.n_fit);
    let id_test = cap(&id.test, diag.n_test);
    let proxy_images = &fit[..diag.proxy_images.min(fit.len())];

    let counter = ForwardCounter::new();
    let probe = Probe::new(bb, &counter);
    let descriptors = |grid: &LevelGrid, hook: &HookId, images: &[Image]| -> Result<Vec<Vec<f64>>> {
        images
            .par_iter()
            .map(|im| Ok(extract_descriptors(&probe, grid, std::slice::from_ref(hook), im, 1, seed)?.remove(0)))
            .collect()
    };

    let mut probes = Vec::new();
    let mut id_cache: HashMap<(usize, usize), (LevelGrid, CfsDetector, Vec<Vec<f64>>, Vec<f64>, f64)> = HashMap::new();
    for ood in &oods {
        for (hi, hook) in hooks.iter().enumerate() {
            for (li, &lambda) in diag.levels.iter().enumerate() {
                if !id_cache.contains_key(&(hi, li)) {
                    let grid = LevelGrid::explicit(&[lambda], true, bb.schedule(), bb.realization())?;
                    let fit_bank = descriptors(&grid, hook, fit)?;
                    let config = CfsConfig {
                        levels: vec![lambda],
                        mode: CfsMode::DEC1X1,
                        ..CfsConfig::default()
                    };
                    let mut det = CfsDetector::new(config, grid.clone(), vec![hook.clone()])?;
                    det.fit_bank(&fit_bank, &det.slot_dims(&probe)?)?;
                    let id_scores = descriptors(&grid, hook, id_test)?
                        .into_iter()
                        .map(|z| det.score_descriptors(&[z]))
                        .collect::<Result<Vec<_>>>()?;
                    let ratio = content_ratio(&probe, hook, &grid, proxy_images, diag.repeats, seed)?;
                    id_cache.insert((hi, li), (grid, det, fit_bank, id_scores, ratio));
                }
                let (grid, det, fit_bank, id_scores, ratio) = &id_cache[&(hi, li)];
                let ood_bank = descriptors(grid, hook, cap(&ood.test, diag.n_test))?;
                let ood_scores = ood_bank
                    .iter()
                    .map(|z| det.score_descriptors(std::slice::from_ref(z)))
                    .collect::<Result<Vec<_>>>()?;
                probes.push(ProbeRow {
                    probe_id: format!("p{:02}", probes.len()),
                    ood: ood.name.clone(),
                    hook: hook.to_string(),
                    level: grid.selected[0].lambda,
                    kappa_hat: kappa_hat(fit_bank, &ood_bank, DEFAULT_FLOOR)?,
                    dim: fit_bank[0].len(),
                    ratio_hat: *ratio,
                    auroc: auroc(id_scores, &ood_scores)?,
                });
            }
        }
    }
    let au: Vec<f64> = probes.iter().map(|p| p.auroc).collect();
    let kd: Vec<f64> = probes.iter().map(|p| p.kappa_hat / p.dim as f64).collect();
    let rr: Vec<f64> = probes.iter().map(|p| p.ratio_hat).collect();
    let spearman_kappa = spearman(&kd, &au)?;
    let spearman_ratio = spearman(&rr, &au)?;

    let (mut low_noise_hook, mut low_noise, mut low_noise_slope) = (None, Vec::new(), None);
    if let Some(ln) = &diag.low_noise {
        let hook = resolve_hooks(bb, &Some(vec![ln.hook.clone()]))?.remove(0);
        let levels = ln
            .lambdas
            .iter()
            .map(|&l| CanonicalLevel::from_logsnr(l, bb.realization()))
            .collect::<Result<Vec<_>>>()?;
        let x0 = &fit
            .get(ln.image)
            .ok_or_else(|| Error::config("low_noise.image is outside the ID-fit split"))?
            .x0;
        low_noise = low_noise_probe(bb, &hook, &levels, x0, ln.draws, seed)?;
        let usable: Vec<&LowNoiseRow> = low_noise.iter().filter(|r| r.b_squared > 0.0 && r.variance > 0.0).collect();
        if usable.len() >= 2 {
            let xs: Vec<f64> = usable.iter().map(|r| r.b_squared.ln()).collect();
            let ys: Vec<f64> = usable.iter().map(|r| r.variance.ln()).collect();
            low_noise_slope = Some(ls_slope(&xs, &ys));
        }
        low_noise_hook = Some(hook.to_string());
    }

    let (mut mismatch, mut mismatch_notice) = (Vec::new(), None);
    if let Some(mm) = &diag.mismatch {
        match bb.schedule() {
            None => {
                let notice = format!(
                    "mismatch probe skipped: backbone {} is continuous; the diagnostic is only meaningful for discrete backbones",
                    bb.name()
                );
                log::warn!("{notice}");
                mismatch_notice = Some(notice);
            }
            Some(schedule) => {
                let lambdas = schedule.lambdas();
                let anchor = *lambdas
                    .get(mm.anchor)
                    .ok_or_else(|| Error::config(format!("mismatch anchor {} outside the schedule", mm.anchor)))?;
                let mm_hooks = match &mm.hooks {
                    Some(_) => resolve_hooks(bb, &mm.hooks)?,
                    None => hooks.clone(),
                };
                let inputs = MismatchInputs {
                    backbone: bb,
                    hooks: &mm_hooks,
                    fit,
                    id_test,
                    ood_test: cap(&oods[0].test, diag.n_test),
                    seed,
                };
                for off in &mm.offsets {
                    mismatch.push(mismatch_drift(&inputs, anchor + off, schedule)?);
                }
            }
        }
    }

    Ok(DiagnosticsReport {
        backbone: bb.name().to_string(),
        probes,
        spearman_kappa,
        spearman_ratio,
        low_noise_hook,
        low_noise,
        low_noise_slope,
        mismatch,
        mismatch_notice,
    })
}

pub const DIAG_CSV_HEADER: &str = "probe_id,level,kappa_hat,ratio_hat,auroc,b_squared,variance";

pub fn diagnostics_csv(report: &DiagnosticsReport) -> String {
    let mut out = format!("{DIAG_CSV_HEADER}\n");
    for p in &report.probes {
        out.push_str(&format!(
            "{}:{}@{},{:.6},{:.6},{:.6},{:.6},,\n",
            p.probe_id, p.hook, p.ood, p.level, p.kappa_hat, p.ratio_hat, p.auroc
        ));
    }
    if let Some(hook) = &report.low_noise_hook {
        for r in &report.low_noise {
            out.push_str(&format!(
                "low_noise:{hook},{:.6},,,,{:.6e},{:.6e}\n",
                r.lambda, r.b_squared, r.variance
            ));
        }
    }
    out
}

pub fn mismatch_csv(rows: &[MismatchRow]) -> String {
    let mut out = String::from("lambda_ref,lambda_matched,mismatch,drift,auroc_delta\n");
    for r in rows {
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.lambda_ref, r.lambda_matched, r.mismatch, r.drift, r.auroc_delta
        ));
    }
    out
}

pub fn emit_diagnostics(report: &DiagnosticsReport, dir: &Path, svg_plots: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    put("diagnostics.csv", diagnostics_csv(report))?;
    if !report.mismatch.is_empty() {
        put("mismatch.csv", mismatch_csv(&report.mismatch))?;
    }
    let summary = json!({
        "backbone": report.backbone,
        "probes": report.probes.len(),
        "spearman_kappa_auroc": report.spearman_kappa,
        "spearman_ratio_auroc": report.spearman_ratio,
        "low_noise_hook": report.low_noise_hook,
        "low_noise_slope": report.low_noise_slope,
        "low_noise_ratio": report.low_noise.iter().map(|r| r.exact.map(|e| r.variance / e)).collect::<Vec<_>>(),
        "mismatch_notice": report.mismatch_notice,
    });
    put("diagnostics.json", serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    if svg_plots {
        let labels: Vec<String> = report.probes.iter().map(|p| format!("{} {}@{}", p.probe_id, p.hook, p.level)).collect();
        let kd: Vec<(f64, f64)> = report.probes.iter().map(|p| (p.kappa_hat / p.dim as f64, p.auroc)).collect();
        put(
            "kappa_auroc.svg",
            svg::scatter("κ̂/d vs AUROC", "κ̂/d", "AUROC", &kd, &labels),
        )?;
        let rr: Vec<(f64, f64)> = report.probes.iter().map(|p| (p.ratio_hat.max(1e-300).log10(), p.auroc)).collect();
        put(
            "ratio_auroc.svg",
            svg::scatter("R̂ vs AUROC", "log10 R̂", "AUROC", &rr, &labels),
        )?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_line() {
        assert!((ls_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
    }
}

//! Canonical Feature Snapshots.
//!
//! A detector corrupts the input once per selected canonical level, runs one
//! forward per level with every slot hook attached, pools each hooked map
//! into channel means and standard deviations, and scores the pooled
//! descriptors against ID-fit diagonal statistics.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::{list_admissible_hooks, HookId, Probe, Query, Region};
use crate::canonical::{corrupt, LevelGrid};
use crate::density::{check_bank, mean_var, DensityHead, DensityKind, DensityParams, Standardizer};
use crate::error::{Error, Result};
use crate::rng::{purpose, NoiseSource};
use crate::tensor::Tensor;
use crate::{Image, DEFAULT_FLOOR};

/// Channel means followed by channel population standard deviations.
pub fn pool(feature: &Tensor) -> Result<Vec<f64>> {
    let [c, h, w] = <[usize; 3]>::try_from(feature.shape())
        .map_err(|_| Error::domain(format!("pooling needs C×H×W, got {:?}", feature.shape())))?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::domain("pooling needs positive dimensions"));
    }
    let plane = h * w;
    let mut out = vec![0.0; 2 * c];
    for (ch, values) in feature.data().chunks_exact(plane).enumerate() {
        let mean = values.iter().sum::<f64>() / plane as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        out[ch] = mean;
        out[c + ch] = var.sqrt();
    }
    Ok(out)
}

/// ID-fit diagonal statistics of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub floor: f64,
    /// Number of ID-fit descriptors the statistics came from.
    pub bank_size: usize,
}

impl SlotStats {
    pub fn fit(bank: &[Vec<f64>], floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::config("variance floor must be positive"));
        }
        check_bank(bank, 2)?;
        let (mean, var) = mean_var(bank, floor)?;
        Ok(Self {
            mean,
            var,
            floor,
            bank_size: bank.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_slot_stats(bank: &[Vec<f64>], floor: f64) -> Result<SlotStats> {
    SlotStats::fit(bank, floor)
}

/// `(1/D)·Σ (z_j − μ̂_j)²/v̂_j`.
pub fn slot_score(z: &[f64], stats: &SlotStats) -> Result<f64> {
    if z.len() != stats.dim() {
        return Err(Error::domain(format!(
            "descriptor has dimension {}, slot expects {}",
            z.len(),
            stats.dim()
        )));
    }
    Ok(z.iter()
        .zip(&stats.mean)
        .zip(&stats.var)
        .map(|((x, m), v)| (x - m) * (x - m) / v)
        .sum::<f64>()
        / z.len() as f64)
}

/// `K_c × K_s`: number of canonical levels times hooks per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CfsMode {
    pub levels: usize,
    pub hooks: usize,
}

impl CfsMode {
    pub const DEC1X1: CfsMode = CfsMode { levels: 1, hooks: 1 };
    pub const ED1X2: CfsMode = CfsMode { levels: 1, hooks: 2 };

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dec1x1" | "dec_only" => return Ok(Self::DEC1X1),
            "ed1x2" | "enc_dec" => return Ok(Self::ED1X2),
            _ => {}
        }
        let bad = || Error::config(format!("mode {s:?} is not dec1x1, ed1x2 or <Kc>x<Ks>"));
        let (kc, ks) = s.split_once('x').ok_or_else(bad)?;
        let mode = CfsMode {
            levels: kc.parse().map_err(|_| bad())?,
            hooks: ks.parse().map_err(|_| bad())?,
        };
        mode.regions()?;
        if mode.levels == 0 {
            return Err(bad());
        }
        Ok(mode)
    }

    /// Structural regions contributing one hook each.
    pub fn regions(&self) -> Result<Vec<Region>> {
        match self.hooks {
            1 => Ok(vec![Region::Decoder]),
            2 => Ok(vec![Region::Encoder, Region::Decoder]),
            3 => Ok(vec![Region::Encoder, Region::Middle, Region::Decoder]),
            k => Err(Error::config(format!("{k} hooks per level is not supported (1 to 3)"))),
        }
    }
}

impl fmt::Display for CfsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::DEC1X1 => f.write_str("dec1x1"),
            Self::ED1X2 => f.write_str("ed1x2"),
            CfsMode { levels, hooks } => write!(f, "{levels}x{hooks}"),
        }
    }
}

impl TryFrom<String> for CfsMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<CfsMode> for String {
    fn from(m: CfsMode) -> String {
        m.to_string()
    }
}

impl Serialize for CfsMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CfsMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CfsMode::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfsHeadKind {
    Diagonal,
    Shrinkage,
    Knn,
    GmmLight,
}

impl CfsHeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CfsHeadKind::Diagonal => "diagonal",
            CfsHeadKind::Shrinkage => "shrinkage",
            CfsHeadKind::Knn => "knn",
            CfsHeadKind::GmmLight => "gmm_light",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Explicit canonical levels (logSNR); must realize `mode.levels` levels.
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: CfsMode,
    #[serde(default = "default_head")]
    pub head: CfsHeadKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Defaults to off for the diagonal head and on for the others.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardize: Option<bool>,
    #[serde(default = "default_shortlist")]
    pub shortlist_size: usize,
    #[serde(default = "default_mc")]
    pub mc_fit: usize,
    #[serde(default = "default_mc")]
    pub mc_test: usize,
    /// ID-fit images used by the hook proxy.
    #[serde(default = "default_probe_images")]
    pub probe_images: usize,
    /// Corruption repeats per probe image in the hook proxy.
    #[serde(default = "default_repeats")]
    pub proxy_repeats: usize,
    /// Weight slot scores by descriptor dimension instead of uniformly.
    #[serde(default)]
    pub d_weighted: bool,
}

fn default_levels() -> Vec<f64> {
    vec![5.0]
}
fn default_mode() -> CfsMode {
    CfsMode::ED1X2
}
fn default_head() -> CfsHeadKind {
    CfsHeadKind::Diagonal
}
fn default_gamma() -> f64 {
    0.1
}
fn default_k() -> usize {
    10
}
fn default_components() -> usize {
    4
}
fn default_iterations() -> usize {
    50
}
fn default_floor() -> f64 {
    DEFAULT_FLOOR
}
fn default_shortlist() -> usize {
    4
}
fn default_mc() -> usize {
    1
}
fn default_probe_images() -> usize {
    32
}
fn default_repeats() -> usize {
    4
}

impl Default for CfsConfig {
    fn default() -> Self {
        Self {
            name: None,
            levels: default_levels(),
            mode: default_mode(),
            head: default_head(),
            gamma: default_gamma(),
            k: default_k(),
            components: default_components(),
            iterations: default_iterations(),
            floor: default_floor(),
            standardize: None,
            shortlist_size: default_shortlist(),
            mc_fit: 1,
            mc_test: 1,
            probe_images: default_probe_images(),
            proxy_repeats: default_repeats(),
            d_weighted: false,
        }
    }
}

impl CfsConfig {
    pub fn with_mode(mode: CfsMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| match self.head {
            CfsHeadKind::Diagonal => format!("cfs_{}", self.mode),
            head => format!("cfs_{}_{}", self.mode, head.as_str()),
        })
    }

    pub fn standardize(&self) -> bool {
        self.standardize
            .unwrap_or(self.head != CfsHeadKind::Diagonal)
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.regions()?;
        if self.levels.len() != self.mode.levels {
            return Err(Error::config(format!(
                "cfs mode {} needs {} levels, got {}",
                self.mode,
                self.mode.levels,
                self.levels.len()
            )));
        }
        if !(self.floor > 0.0) {
            return Err(Error::config("cfs floor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("shrinkage gamma must lie in [0, 1]"));
        }
        if self.mc_fit == 0 || self.mc_test == 0 {
            return Err(Error::config("mc_fit and mc_test must be positive"));
        }
        if self.shortlist_size == 0 {
            return Err(Error::config("shortlist_size must be positive"));
        }
        if self.probe_images < 2 || self.proxy_repeats < 2 {
            return Err(Error::config("hook proxy needs probe_images ≥ 2 and proxy_repeats ≥ 2"));
        }
        Ok(())
    }
}

/// Pooled descriptors of every hook, one entry per corruption draw,
/// averaged over the grid's levels.
fn proxy_descriptors(
    probe: &Probe<'_>,
    hooks: &[HookId],
    image: &Image,
    repeat: usize,
    grid: &LevelGrid,
    noise: &NoiseSource,
) -> Result<Vec<Vec<f64>>> {
    let key = [purpose::PROXY, image.id, repeat as u64];
    let eps = noise.normal_tensor(&key, image.x0.shape());
    let qkey = noise.query_key(&key);
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for level in &grid.selected {
        let x = corrupt(&image.x0, level, &eps)?;
        let out = probe.forward(&Query::keyed(&x, level, qkey), hooks)?;
        for (i, h) in hooks.iter().enumerate() {
            let z = pool(out.activation(h)?)?;
            if acc.len() <= i {
                acc.push(vec![0.0; z.len()]);
            }
            for (a, v) in acc[i].iter_mut().zip(&z) {
                *a += v / grid.len() as f64;
            }
        }
    }
    Ok(acc)
}

fn trace_cov(rows: &[&Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut tr = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        tr += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    tr
}

/// Content-to-instability ratio of each hook, in the order given.
///
/// `tr Ĉ_img / max(tr Ĉ_corr, floor)` with `Ĉ_img` the covariance of the
/// per-image mean descriptors and `Ĉ_corr` the per-image covariance across
/// corruption repeats averaged over images (both with the `n − 1` divisor).
pub fn proxy_table(
    probe: &Probe<'_>,
    hooks: &[HookId],
    images: &[Image],
    repeats: usize,
    grid: &LevelGrid,
    seed: u64,
    floor: f64,
) -> Result<Vec<f64>> {
    if images.len() < 2 || repeats < 2 {
        return Err(Error::fit(format!(
            "hook proxy needs ≥ 2 images and ≥ 2 repeats, got {} and {repeats}",
            images.len()
        )));
    }
    if hooks.is_empty() {
        return Ok(Vec::new());
    }
    let noise = NoiseSource::new(seed);
    // draws[image][repeat][hook]
    let draws: Vec<Vec<Vec<Vec<f64>>>> = images
        .iter()
        .map(|img| {
            (0..repeats)
                .map(|r| proxy_descriptors(probe, hooks, img, r, grid, &noise))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..hooks.len())
        .map(|h| {
            let means: Vec<Vec<f64>> = draws
                .iter()
                .map(|reps| {
                    let d = reps[0][h].len();
                    (0..d)
                        .map(|j| reps.iter().map(|r| r[h][j]).sum::<f64>() / repeats as f64)
                        .collect()
                })
                .collect();
            let img = trace_cov(&means.iter().collect::<Vec<_>>());
            let corr = draws
                .iter()
                .map(|reps| trace_cov(&reps.iter().map(|r| &r[h]).collect::<Vec<_>>()))
                .sum::<f64>()
                / images.len() as f64;
            img / corr.max(floor)
        })
        .collect())
}

pub fn hook_proxy(
    probe: &Probe<'_>,
    hook: &HookId,
    images: &[Image],
    repeats: usize,
    grid: &LevelGrid,
    seed: u64,
) -> Result<f64> {
    Ok(proxy_table(probe, std::slice::from_ref(hook), images, repeats, grid, seed, DEFAULT_FLOOR)?[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct HookRow {
    pub hook: HookId,
    pub shape: Vec<usize>,
    pub proxy: f64,
    pub shortlisted: bool,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HookSelection {
    /// Selected hooks, one per required region, in structural order.
    pub hooks: Vec<HookId>,
    /// Every admissible hook with its proxy value.
    pub table: Vec<HookRow>,
    pub regions: Vec<Region>,
}

/// Per required region: the first `shortlist_size` admissible hooks in
/// structural order form the shortlist, and the one with the largest proxy
/// is kept (structural order breaks ties).
#[allow(clippy::too_many_arguments)]
pub fn select_hooks(
    probe: &Probe<'_>,
    grid: &LevelGrid,
    images: &[Image],
    repeats: usize,
    shortlist_size: usize,
    regions: &[Region],
    seed: u64,
    floor: f64,
) -> Result<HookSelection> {
    let shapes = probe.backbone().dry_run_shapes()?;
    let admissible = list_admissible_hooks(probe.backbone())?;
    for region in regions {
        if !admissible.iter().any(|h| h.region == *region) {
            return Err(Error::config(format!(
                "backbone {} has no admissible {} hook",
                probe.backbone().name(),
                region.as_str()
            )));
        }
    }
    let proxies = proxy_table(probe, &admissible, images, repeats, grid, seed, floor)?;
    let mut table: Vec<HookRow> = admissible
        .iter()
        .zip(&proxies)
        .map(|(h, &p)| HookRow {
            hook: h.clone(),
            shape: shapes
                .iter()
                .find(|(k, _)| k == h)
                .map(|(_, s)| s.clone())
                .unwrap_or_default(),
            proxy: p,
            shortlisted: false,
            selected: false,
        })
        .collect();
    let mut hooks = Vec::new();
    for region in regions {
        let mut best: Option<usize> = None;
        let shortlist: Vec<usize> = (0..table.len())
            .filter(|&i| table[i].hook.region == *region)
            .take(shortlist_size)
            .collect();
        for i in shortlist {
            table[i].shortlisted = true;
            if best.is_none_or(|b| table[i].proxy > table[b].proxy) {
                best = Some(i);
            }
        }
        let b = best.expect("region checked nonempty");
        table[b].selected = true;
        hooks.push(table[b].hook.clone());
    }
    Ok(HookSelection {
        hooks,
        table,
        regions: regions.to_vec(),
    })
}

/// Concatenated slot descriptors (levels outer, hooks inner), one vector per
/// corruption draw. The same noise draw is reused across levels.
pub fn extract_descriptors(
    probe: &Probe<'_>,
    grid: &LevelGrid,
    hooks: &[HookId],
    image: &Image,
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let noise = NoiseSource::new(seed);
    (0..draws)
        .map(|r| {
            let key = [purpose::CFS, image.id, r as u64];
            let eps = noise.normal_tensor(&key, image.x0.shape());
            let qkey = noise.query_key(&key);
            let mut z = Vec::new();
            for level in &grid.selected {
                let x = corrupt(&image.x0, level, &eps)?;
                let out = probe.forward(&Query::keyed(&x, level, qkey), hooks)?;
                for h in hooks {
                    z.extend(pool(out.activation(h)?)?);
                }
            }
            Ok(z)
        })
        .collect()
}

#[derive(Debug, Clone)]
enum HeadState {
    Diagonal(Vec<SlotStats>),
    Shrinkage {
        mean: DVector<f64>,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    },
    Density(DensityHead),
}

/// ID-fitted scorer over concatenated slot descriptors.
#[derive(Debug, Clone)]
pub struct CfsHead {
    kind: CfsHeadKind,
    slot_dims: Vec<usize>,
    d_weighted: bool,
    standardizer: Option<Standardizer>,
    state: HeadState,
}

impl CfsHead {
    pub fn fit(bank: &[Vec<f64>], slot_dims: &[usize], config: &CfsConfig) -> Result<Self> {
        let d = check_bank(bank, 2)?;
        if slot_dims.iter().sum::<usize>() != d {
            return Err(Error::domain("slot dimensions do not cover the descriptor"));
        }
        let floor = config.floor;
        let standardizer = if config.standardize() {
            Some(Standardizer::fit(bank, floor)?)
        } else {
            None
        };
        let bank: Vec<Vec<f64>> = match &standardizer {
            Some(s) => bank.iter().map(|z| s.apply(z)).collect(),
            None => bank.to_vec(),
        };
        let state = match config.head {
            CfsHeadKind::Diagonal => {
                let mut stats = Vec::new();
                let mut start = 0;
                for &sd in slot_dims {
                    let slot: Vec<Vec<f64>> = bank.iter().map(|z| z[start..start + sd].to_vec()).collect();
                    stats.push(SlotStats::fit(&slot, floor)?);
                    start += sd;
                }
                HeadState::Diagonal(stats)
            }
            CfsHeadKind::Shrinkage => {
                let n = bank.len() as f64;
                let (mean, var) = mean_var(&bank, floor)?;
                let mut cov = DMatrix::<f64>::zeros(d, d);
                for z in &bank {
                    let c = DVector::from_iterator(d, z.iter().zip(&mean).map(|(v, m)| v - m));
                    cov += &c * c.transpose();
                }
                cov /= n;
                let g = config.gamma;
                let mut shrunk = cov.scale(1.0 - g);
                for j in 0..d {
                    shrunk[(j, j)] = (1.0 - g) * cov[(j, j)].max(floor) + g * var[j];
                }
                let chol = factor_with_ridge(shrunk, floor)?;
                HeadState::Shrinkage {
                    mean: DVector::from_vec(mean),
                    chol,
                }
            }
            CfsHeadKind::Knn => HeadState::Density(DensityHead::fit(
                &bank,
                DensityKind::Knn,
                &DensityParams {
                    k: config.k,
                    floor,
                    ..DensityParams::default()
                },
            )?),
            CfsHeadKind::GmmLight => HeadState::Density(DensityHead::fit(
                &bank,
                DensityKind::Gmm,
                &DensityParams {
                    components: config.components,
                    iterations: config.iterations,
                    floor,
                    ..DensityParams::default()
                },
            )?),
        };
        Ok(Self {
            kind: config.head,
            slot_dims: slot_dims.to_vec(),
            d_weighted: config.d_weighted,
            standardizer,
            state,
        })
    }

    pub fn kind(&self) -> CfsHeadKind {
        self.kind
    }

    pub fn slot_stats(&self) -> Option<&[SlotStats]> {
        match &self.state {
            HeadState::Diagonal(s) => Some(s),
            _ => None,
        }
    }

    pub fn score(&self, z: &[f64]) -> Result<f64> {
        let d: usize = self.slot_dims.iter().sum();
        if z.len() != d {
            return Err(Error::domain(format!(
                "descriptor has dimension {}, head expects {d}",
                z.len()
            )));
        }
        let owned;
        let z = match &self.standardizer {
            Some(s) => {
                owned = s.apply(z);
                owned.as_slice()
            }
            None => z,
        };
        match &self.state {
            HeadState::Diagonal(stats) => {
                let mut start = 0;
                let (mut total, mut weight) = (0.0, 0.0);
                for s in stats {
                    let score = slot_score(&z[start..start + s.dim()], s)?;
                    let w = if self.d_weighted { s.dim() as f64 } else { 1.0 };
                    total += w * score;
                    weight += w;
                    start += s.dim();
                }
                Ok(total / weight)
            }
            HeadState::Shrinkage { mean, chol } => {
                let c = DVector::from_column_slice(z) - mean;
                let sol = chol.solve(&c);
                Ok(c.dot(&sol) / d as f64)
            }
            HeadState::Density(head) => head.score(z),
        }
    }
}

fn factor_with_ridge(
    m: DMatrix<f64>,
    floor: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut a = m.clone();
        for j in 0..a.nrows() {
            a[(j, j)] += ridge;
        }
        if let Some(c) = a.cholesky() {
            return Ok(c);
        }
        ridge = if ridge == 0.0 { floor } else { ridge * 10.0 };
    }
    Err(Error::Numerical("shrinkage covariance is not positive definite".into()))
}

/// A CFS detector: levels, slot hooks and, once fitted, its ID-only head.
#[derive(Debug, Clone)]
pub struct CfsDetector {
    config: CfsConfig,
    grid: LevelGrid,
    hooks: Vec<HookId>,
    head: Option<CfsHead>,
}

impl CfsDetector {
    pub fn new(config: CfsConfig, grid: LevelGrid, hooks: Vec<HookId>) -> Result<Self> {
        if hooks.is_empty() {
            return Err(Error::config("cfs needs at least one hook"));
        }
        Ok(Self {
            config,
            grid,
            hooks,
            head: None,
        })
    }

    /// Realizes the configured levels on the probe's backbone and selects
    /// one hook per required region with the ID-only proxy.
    pub fn plan(probe: &Probe<'_>, config: &CfsConfig, fit: &[Image], seed: u64) -> Result<(Self, HookSelection)> {
        config.validate()?;
        let bb = probe.backbone();
        let grid = LevelGrid::explicit(&config.levels, true, bb.schedule(), bb.realization())?;
        if grid.len() != config.mode.levels {
            return Err(Error::config(format!(
                "cfs levels {:?} realize {} distinct levels on {}, mode {} needs {}",
                config.levels,
                grid.len(),
                bb.name(),
                config.mode,
                config.mode.levels
            )));
        }
        let n = config.probe_images.min(fit.len());
        let selection = select_hooks(
            probe,
            &grid,
            &fit[..n],
            config.proxy_repeats,
            config.shortlist_size,
            &config.mode.regions()?,
            seed,
            config.floor,
        )?;
        let det = Self::new(config.clone(), grid, selection.hooks.clone())?;
        Ok((det, selection))
    }

    pub fn grid(&self) -> &LevelGrid {
        &self.grid
    }

    pub fn hooks(&self) -> &[HookId] {
        &self.hooks
    }

    pub fn config(&self) -> &CfsConfig {
        &self.config
    }

    pub fn head(&self) -> Option<&CfsHead> {
        self.head.as_ref()
    }

    /// Forwards per scored image: one per level and test draw.
    pub fn declared_forwards(&self) -> u64 {
        (self.grid.len() * self.config.mc_test) as u64
    }

    /// Descriptor widths per slot, levels outer and hooks inner.
    pub fn slot_dims(&self, probe: &Probe<'_>) -> Result<Vec<usize>> {
        let shapes = probe.backbone().dry_run_shapes()?;
        let per_level: Vec<usize> = self
            .hooks
            .iter()
            .map(|h| {
                shapes
                    .iter()
                    .find(|(k, _)| k == h)
                    .map(|(_, s)| 2 * s[0])
                    .ok_or_else(|| crate::backbone::unknown_hook(probe.backbone().name(), h))
            })
            .collect::<Result<_>>()?;
        Ok((0..self.grid.len()).flat_map(|_| per_level.clone()).collect())
    }

    pub fn fit_bank(&mut self, bank: &[Vec<f64>], slot_dims: &[usize]) -> Result<()> {
        self.head = Some(CfsHead::fit(bank, slot_dims, &self.config)?);
        Ok(())
    }

    pub fn fit(&mut self, probe: &Probe<'_>, images: &[Image], seed: u64) -> Result<()> {
        let mut bank = Vec::new();
        for img in images {
            bank.extend(extract_descriptors(probe, &self.grid, &self.hooks, img, self.config.mc_fit, seed)?);
        }
        let dims = self.slot_dims(probe)?;
        self.fit_bank(&bank, &dims)
    }

    /// Score of already extracted test draws: the mean head score.
    pub fn score_descriptors(&self, draws: &[Vec<f64>]) -> Result<f64> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::State("cfs detector is not fitted".into()))?;
        let mut total = 0.0;
        for z in draws {
            total += head.score(z)?;
        }
        Ok(total / draws.len() as f64)
    }

    pub fn score(&self, probe: &Probe<'_>, image: &Image, seed: u64) -> Result<f64> {
        if self.head.is_none() {
            return Err(Error::State("cfs detector is not fitted".into()));
        }
        let draws = extract_descriptors(probe, &self.grid, &self.hooks, image, self.config.mc_test, seed)?;
        self.score_descriptors(&draws)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AnalyticGaussianBackbone, Backbone, FeatureMap, ForwardCounter};
    use crate::canonical::Realization;
    use crate::metrics::auroc;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn pool_examples() {
        assert_eq!(pool(&Tensor::filled(&[1, 2, 3], 4.0)).unwrap(), vec![4.0, 0.0]);
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(pool(&t).unwrap(), vec![1.0, 1.0]);
        let t = Tensor::new(vec![2, 1, 2], vec![3.0, 3.0, -3.0, -3.0]).unwrap();
        assert_eq!(pool(&t).unwrap(), vec![3.0, -3.0, 0.0, 0.0]);
        assert!(pool(&Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn slot_stats_examples() {
        let s = fit_slot_stats(&[vec![0.0, 0.0], vec![2.0, 2.0]], 1e-6).unwrap();
        assert_eq!((s.mean.clone(), s.var.clone()), (vec![1.0, 1.0], vec![1.0, 1.0]));
        let s = fit_slot_stats(&vec![vec![5.0, -1.0]; 3], 1e-6).unwrap();
        assert_eq!(s.var, vec![1e-6, 1e-6]);
        let s = fit_slot_stats(&[vec![0.0], vec![0.0], vec![3.0]], 1e-6).unwrap();
        assert_eq!((s.mean[0], s.var[0]), (1.0, 2.0));
        assert!(matches!(fit_slot_stats(&[vec![1.0]], 1e-6), Err(Error::Fit(_))));
    }

    #[test]
    fn slot_score_examples() {
        let s = SlotStats { mean: vec![0.0, 0.0], var: vec![1.0, 4.0], floor: 1e-6, bank_size: 2 };
        assert_eq!(slot_score(&[2.0, 2.0], &s).unwrap(), 2.5);
        assert_eq!(slot_score(&[0.0, 0.0], &s).unwrap(), 0.0);
        assert_eq!(slot_score(&[1.0, 2.0], &s).unwrap(), 1.0);
        assert!(matches!(slot_score(&[1.0], &s), Err(Error::Domain(_))));
    }

    #[test]
    fn uniform_average_of_slots() {
        let bank = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
        let mut det = CfsDetector::new(
            CfsConfig::default(),
            LevelGrid::explicit(&[5.0], true, None, Realization::Ve).unwrap(),
            vec![HookId::new(Region::Decoder, 0)],
        )
        .unwrap();
        assert!(matches!(det.score_descriptors(&[vec![1.0, 1.0]]), Err(Error::State(_))));
        det.fit_bank(&bank, &[1, 1]).unwrap();
        // slot scores (2−1)²/1 = 1 and (√3)²/1 = 3 average to 2
        let z = vec![2.0, 1.0 + 3f64.sqrt()];
        assert!((det.score_descriptors(&[z]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(det.score_descriptors(&[vec![1.0, 1.0]]).unwrap(), 0.0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(CfsMode::parse("dec1x1").unwrap(), CfsMode::DEC1X1);
        assert_eq!(CfsMode::parse("ed1x2").unwrap(), CfsMode::ED1X2);
        assert_eq!(CfsMode::parse("3x2").unwrap(), CfsMode { levels: 3, hooks: 2 });
        assert_eq!(CfsMode::parse("1x2").unwrap().to_string(), "ed1x2");
        for bad in ["", "x2", "2x0", "2x4", "0x1", "ed"] {
            assert!(CfsMode::parse(bad).is_err(), "{bad}");
        }
    }

    fn gaussian_bank(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = NoiseSource::new(seed).rng(&[0]);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (1.0 + j as f64) * z + if j == 0 { shift } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn shrinkage_limit_is_diagonal() {
        let bank = gaussian_bank(200, 4, 0.0, 1);
        let mut cfg = CfsConfig { head: CfsHeadKind::Shrinkage, gamma: 1.0, standardize: Some(false), ..CfsConfig::default() };
        let shrink = CfsHead::fit(&bank, &[4], &cfg).unwrap();
        cfg.head = CfsHeadKind::Diagonal;
        let diag = CfsHead::fit(&bank, &[4], &cfg).unwrap();
        for z in gaussian_bank(20, 4, 1.0, 2) {
            let (a, b) = (shrink.score(&z).unwrap(), diag.score(&z).unwrap());
            assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn single_component_gmm_ranks_like_diagonal() {
        let bank = gaussian_bank(300, 3, 0.0, 3);
        let base = CfsConfig { standardize: Some(false), ..CfsConfig::default() };
        let diag = CfsHead::fit(&bank, &[3], &base).unwrap();
        let gmm = CfsHead::fit(&bank, &[3], &CfsConfig { head: CfsHeadKind::GmmLight, components: 1, ..base }).unwrap();
        let test = gaussian_bank(200, 3, 0.5, 4);
        let a: Vec<f64> = test.iter().map(|z| diag.score(z).unwrap()).collect();
        let b: Vec<f64> = test.iter().map(|z| gmm.score(z).unwrap()).collect();
        for i in 0..a.len() {
            for j in 0..a.len() {
                if (a[i] - a[j]).abs() > 1e-9 {
                    assert_eq!(a[i] < a[j], b[i] < b[j]);
                }
            }
        }
    }

    #[test]
    fn heads_detect_two_gaussian_pair() {
        let bank = gaussian_bank(500, 4, 0.0, 5);
        let id = gaussian_bank(300, 4, 0.0, 6);
        let ood = gaussian_bank(300, 4, 3.0, 7);
        for head in [CfsHeadKind::Diagonal, CfsHeadKind::Shrinkage, CfsHeadKind::Knn, CfsHeadKind::GmmLight] {
            let h = CfsHead::fit(&bank, &[4], &CfsConfig { head, ..CfsConfig::default() }).unwrap();
            let si: Vec<f64> = id.iter().map(|z| h.score(z).unwrap()).collect();
            let so: Vec<f64> = ood.iter().map(|z| h.score(z).unwrap()).collect();
            let a = auroc(&si, &so).unwrap();
            assert!((0.5..=1.0).contains(&a) && a > 0.6, "{head:?} {a}");
        }
        let knn = CfsHead::fit(&bank, &[4], &CfsConfig { head: CfsHeadKind::Knn, k: 1, standardize: Some(false), ..CfsConfig::default() }).unwrap();
        assert_eq!(knn.score(&bank[3]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn diagonal_score_scale_equivariant(
            scales in prop::collection::vec(prop_oneof![0.01f64..100.0, -100.0f64..-0.01], 3),
            seed in 0u64..1000,
        ) {
            let bank = gaussian_bank(30, 3, 0.0, seed);
            let query = gaussian_bank(5, 3, 1.0, seed + 1);
            let scale = |z: &Vec<f64>| z.iter().zip(&scales).map(|(v, s)| v * s).collect::<Vec<_>>();
            let floor = 1e-12;
            let s1 = fit_slot_stats(&bank, floor).unwrap();
            let s2 = fit_slot_stats(&bank.iter().map(scale).collect::<Vec<_>>(), floor).unwrap();
            for q in &query {
                let a = slot_score(q, &s1).unwrap();
                let b = slot_score(&scale(q), &s2).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
        }
    }

    fn content_noise_backbone() -> AnalyticGaussianBackbone {
        // decoder.0 sees the image, decoder.1 a fixed projection shared by all
        // inputs plus noise; encoder.0 is a content hook as well
        let d = 4;
        let sel = |hook: HookId, idx: &[usize]| {
            let mut w = vec![0.0; idx.len() * d];
            for (r, &i) in idx.iter().enumerate() {
                w[r * d + i] = 1.0;
            }
            FeatureMap::new(hook, w, vec![0.0; idx.len()], vec![idx.len(), 1, 1]).unwrap()
        };
        AnalyticGaussianBackbone::new(
            "a",
            vec![4, 1, 1],
            vec![0.0; 4],
            vec![1.0, 1.0, 1e-8, 1e-8],
            vec![
                sel(HookId::new(Region::Encoder, 0), &[0]),
                sel(HookId::new(Region::Decoder, 0), &[0, 1]),
                sel(HookId::new(Region::Decoder, 1), &[2, 3]),
            ],
        )
        .unwrap()
    }

    fn images(n: usize, seed: u64, var: &[f64]) -> Vec<Image> {
        let noise = NoiseSource::new(seed);
        (0..n)
            .map(|i| {
                let z = noise.normals(&[i as u64], var.len());
                let x: Vec<f64> = z.iter().zip(var).map(|(z, v)| z * v.sqrt()).collect();
                Image::new(i as u64, Tensor::new(vec![var.len(), 1, 1], x).unwrap())
            })
            .collect()
    }

    #[test]
    fn proxy_cases_and_selection() {
        let bb = content_noise_backbone();
        let counter = ForwardCounter::new();
        let probe = Probe::new(&bb, &counter);
        let grid = LevelGrid::explicit(&[2.0], true, None, Realization::Ve).unwrap();
        let imgs = images(40, 1, &[1.0, 1.0, 1e-8, 1e-8]);
        let hooks = list_admissible_hooks(&bb).unwrap();
        let p = proxy_table(&probe, &hooks, &imgs, 4, &grid, 0, DEFAULT_FLOOR).unwrap();
        // content hooks: R̂ ≫ 1; noise hook: close to 1/R
        assert!(p[0] > 5.0 && p[1] > 5.0, "{p:?}");
        assert!(p[2] < 0.6, "{p:?}");
        assert_eq!(counter.forwards(), 160);

        let sel = select_hooks(&probe, &grid, &imgs, 4, 4, &[Region::Encoder, Region::Decoder], 0, DEFAULT_FLOOR).unwrap();
        assert_eq!(sel.hooks, vec![HookId::new(Region::Encoder, 0), HookId::new(Region::Decoder, 0)]);
        let sel = select_hooks(&probe, &grid, &imgs, 4, 1, &[Region::Decoder], 0, DEFAULT_FLOOR).unwrap();
        assert_eq!(sel.hooks, vec![HookId::new(Region::Decoder, 0)]);
        assert!(select_hooks(&probe, &grid, &imgs, 4, 4, &[Region::Middle], 0, DEFAULT_FLOOR).is_err());

        let same: Vec<Image> = (0..10).map(|i| Image::new(i, imgs[0].x0.clone())).collect();
        let clean = LevelGrid::explicit(&[60.0], true, None, Realization::Ve).unwrap();
        let p = proxy_table(&probe, &hooks[1..2], &same, 3, &clean, 0, DEFAULT_FLOOR).unwrap();
        assert!(p[0] < 1e-6);
        let p = proxy_table(&probe, &hooks[1..2], &imgs, 3, &clean, 0, DEFAULT_FLOOR).unwrap();
        assert!(p[0] > 1e4);
        assert!(matches!(proxy_table(&probe, &hooks, &imgs[..1], 3, &grid, 0, 1e-6), Err(Error::Fit(_))));
    }

    #[test]
    fn budget_is_one_forward_per_level() {
        let bb = content_noise_backbone();
        let imgs = images(30, 2, &[1.0, 1.0, 1e-8, 1e-8]);
        for (levels, mode) in [(vec![5.0], CfsMode::DEC1X1), (vec![5.0], CfsMode::ED1X2), (vec![5.0, 3.0, 1.0], CfsMode { levels: 3, hooks: 2 })] {
            let fit_counter = ForwardCounter::new();
            let fit_probe = Probe::new(&bb, &fit_counter);
            let cfg = CfsConfig { levels, mode, ..CfsConfig::default() };
            let (mut det, _) = CfsDetector::plan(&fit_probe, &cfg, &imgs, 0).unwrap();
            det.fit(&fit_probe, &imgs, 0).unwrap();
            let counter = ForwardCounter::new();
            det.score(&Probe::new(&bb, &counter), &imgs[0], 0).unwrap();
            assert_eq!(counter.forwards(), mode.levels as u64);
            assert_eq!(det.declared_forwards(), mode.levels as u64);
        }
        assert!(bb.schedule().is_none());
    }
}

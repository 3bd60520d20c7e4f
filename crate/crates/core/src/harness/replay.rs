//! Recording a live run into a feature dump and the matching replay run.

use std::path::Path;

use super::dataset::DatasetKind;
use super::{run_benchmark_with, BenchmarkReport};
use crate::backbone::dump::DumpRecord;
use crate::backbone::{Backbone, RecordingBackbone};
use crate::config::{BackboneConfig, ReplayConfig, RunConfig};
use crate::error::{Error, Result};

/// The part of `config` a dump can serve: the dumped backbone and the CFS
/// methods, whose queries are all keyed.
pub fn replayable_config(config: &RunConfig) -> Result<RunConfig> {
    let name = match config.dump.as_ref().and_then(|d| d.backbone.clone()) {
        Some(name) => name,
        None => config.backbones[0].name().to_string(),
    };
    let backbone = config
        .backbones
        .iter()
        .find(|b| b.name() == name)
        .ok_or_else(|| Error::config(format!("dump backbone {name:?} is not configured")))?
        .clone();
    if matches!(backbone, BackboneConfig::Replay(_)) {
        return Err(Error::config("cannot dump a replay backbone"));
    }
    let mut out = config.clone();
    out.backbones = vec![backbone];
    out.methods.retain(|m| m.is_cfs());
    if out.methods.len() < config.methods.len() {
        log::warn!("dump keeps only the cfs methods; other methods issue queries a dump cannot serve");
    }
    out.diagnostics = None;
    Ok(out)
}

/// Runs the replayable part of `config` live while recording every keyed
/// pass of the dumped backbone.
pub fn record_run(config: &RunConfig) -> Result<(RunConfig, BenchmarkReport, Vec<DumpRecord>)> {
    let live = replayable_config(config)?;
    let recorder = RecordingBackbone::new(live.backbones[0].build()?)?;
    let report = run_benchmark_with(&live, &[&recorder as &dyn Backbone])?;
    Ok((live, report, recorder.records()))
}

/// The replay twin of a recorded configuration: same names, splits, seeds
/// and methods, with the backbone read from `dump_path`.
pub fn replay_config(live: &RunConfig, dump_path: &Path) -> Result<RunConfig> {
    let bb_cfg = &live.backbones[0];
    let bb = bb_cfg.build()?;
    let schedule = match bb_cfg {
        BackboneConfig::Analytic(c) => c.schedule.clone(),
        BackboneConfig::Tinyunet(c) => c.schedule.clone(),
        BackboneConfig::Replay(c) => c.schedule.clone(),
    };
    let mut out = live.clone();
    out.backbones = vec![BackboneConfig::Replay(ReplayConfig {
        name: bb.name().to_string(),
        path: dump_path.display().to_string(),
        shape: bb.input_shape().to_vec(),
        schedule,
        realization: bb.realization(),
    })];
    for d in &mut out.datasets {
        d.kind = DatasetKind::DumpReplay;
        d.components.clear();
        d.shift = None;
    }
    out.dump = None;
    out.validate()?;
    Ok(out)
}

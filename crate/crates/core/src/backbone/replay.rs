use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use super::dump::{read_dump, DumpRecord, EPSHAT, XHAT0};
use super::{list_admissible_hooks, unknown_hook, Backbone, BackboneOutput, HookId, Query};
use crate::canonical::{DiscreteSchedule, Realization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serves stored passes from a feature dump.
///
/// A pass is addressed by the query key and the exact logSNR of the level,
/// so a replay run must rebuild the same grid and the same sample keys as
/// the recorded run.
pub struct ReplayBackbone {
    name: String,
    shape: Vec<usize>,
    schedule: Option<DiscreteSchedule>,
    realization: Realization,
    hooks: Vec<(HookId, Vec<usize>)>,
    passes: HashMap<(u64, u64), BackboneOutput>,
}

impl ReplayBackbone {
    pub fn open(
        name: &str,
        path: &Path,
        shape: Vec<usize>,
        schedule: Option<DiscreteSchedule>,
        realization: Realization,
    ) -> Result<Self> {
        Self::from_records(name, read_dump(path)?, shape, schedule, realization)
    }

    pub fn from_records(
        name: &str,
        records: Vec<DumpRecord>,
        shape: Vec<usize>,
        schedule: Option<DiscreteSchedule>,
        realization: Realization,
    ) -> Result<Self> {
        let mut partial: HashMap<(u64, u64), (Option<Tensor>, Option<Tensor>, BTreeMap<HookId, Tensor>)> =
            HashMap::new();
        let mut shapes: BTreeMap<HookId, Vec<usize>> = BTreeMap::new();
        for r in records {
            let entry = partial.entry((r.image_id, r.lambda.to_bits())).or_default();
            match r.name.as_str() {
                XHAT0 | EPSHAT => {
                    if r.tensor.shape() != shape.as_slice() {
                        return Err(Error::format(format!(
                            "{} has shape {:?}, replay expects {:?}",
                            r.name,
                            r.tensor.shape(),
                            shape
                        )));
                    }
                    if r.name == XHAT0 {
                        entry.0 = Some(r.tensor);
                    } else {
                        entry.1 = Some(r.tensor);
                    }
                }
                name => {
                    let hook = HookId::parse(name).map_err(|e| Error::format(e.to_string()))?;
                    match shapes.get(&hook) {
                        Some(s) if s.as_slice() != r.tensor.shape() => {
                            return Err(Error::format(format!(
                                "hook {hook} changes shape across records"
                            )))
                        }
                        Some(_) => {}
                        None => {
                            shapes.insert(hook.clone(), r.tensor.shape().to_vec());
                        }
                    }
                    entry.2.insert(hook, r.tensor);
                }
            }
        }
        let passes = partial
            .into_iter()
            .map(|(k, (x, e, acts))| {
                Ok((
                    k,
                    BackboneOutput {
                        xhat0: x.ok_or_else(|| Error::format("pass without x̂₀"))?,
                        epshat: e.ok_or_else(|| Error::format("pass without ε̂"))?,
                        activations: acts,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            shape,
            schedule,
            realization,
            hooks: shapes.into_iter().collect(),
            passes,
        })
    }

    /// Number of stored passes.
    pub fn len(&self) -> usize {
        self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }
}

/// Opens a dump with the input shape taken from its stored `x̂₀`.
pub fn replay_open(path: &Path) -> Result<ReplayBackbone> {
    let records = read_dump(path)?;
    let shape = records
        .iter()
        .find(|r| r.name == XHAT0)
        .map(|r| r.tensor.shape().to_vec())
        .unwrap_or_default();
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("replay")
        .to_string();
    ReplayBackbone::from_records(&name, records, shape, None, Realization::Ve)
}

impl Backbone for ReplayBackbone {
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
        self.hooks.iter().map(|(h, _)| h.clone()).collect()
    }

    fn dry_run_shapes(&self) -> Result<Vec<(HookId, Vec<usize>)>> {
        Ok(self.hooks.clone())
    }

    fn evaluate(&self, query: &Query<'_>, hooks: &[HookId]) -> Result<BackboneOutput> {
        if query.input.shape() != self.shape.as_slice() {
            return Err(Error::domain(format!(
                "input shape {:?}, replay stores {:?}",
                query.input.shape(),
                self.shape
            )));
        }
        if let Some(bad) = hooks.iter().find(|h| !self.hooks.iter().any(|(k, _)| k == *h)) {
            return Err(unknown_hook(&self.name, bad));
        }
        let key = query.key.ok_or_else(|| {
            Error::Lookup("replay can only serve canonical corruptions of stored images".into())
        })?;
        let pass = self.passes.get(&(key, query.level.lambda.to_bits())).ok_or_else(|| {
            Error::Lookup(format!(
                "no stored pass for image {key} at λ = {}",
                query.level.lambda
            ))
        })?;
        let mut activations = BTreeMap::new();
        for hook in hooks {
            let t = pass.activations.get(hook).ok_or_else(|| {
                Error::Lookup(format!("image {key} at λ = {} lacks {hook}", query.level.lambda))
            })?;
            activations.insert(hook.clone(), t.clone());
        }
        Ok(BackboneOutput {
            xhat0: pass.xhat0.clone(),
            epshat: pass.epshat.clone(),
            activations,
        })
    }
}

/// Wraps a live backbone and keeps every keyed pass, with all admissible
/// hooks, for writing a dump.
pub struct RecordingBackbone {
    inner: Box<dyn Backbone>,
    hooks: Vec<HookId>,
    store: Mutex<BTreeMap<(u64, u64), BackboneOutput>>,
}

impl RecordingBackbone {
    pub fn new(inner: Box<dyn Backbone>) -> Result<Self> {
        let hooks = list_admissible_hooks(inner.as_ref())?;
        Ok(Self {
            inner,
            hooks,
            store: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn passes(&self) -> usize {
        self.store.lock().unwrap().len()
    }

    /// Stored passes as dump records, sorted by (key, λ bits, name).
    pub fn records(&self) -> Vec<DumpRecord> {
        let store = self.store.lock().unwrap();
        let mut out = Vec::new();
        for (&(id, bits), pass) in store.iter() {
            let lambda = f64::from_bits(bits);
            let rec = |name: &str, t: &Tensor| DumpRecord {
                image_id: id,
                lambda,
                name: name.to_string(),
                tensor: t.clone(),
            };
            out.push(rec(XHAT0, &pass.xhat0));
            out.push(rec(EPSHAT, &pass.epshat));
            for (hook, t) in &pass.activations {
                out.push(rec(&hook.name, t));
            }
        }
        out
    }
}

impl Backbone for RecordingBackbone {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn input_shape(&self) -> &[usize] {
        self.inner.input_shape()
    }

    fn schedule(&self) -> Option<&DiscreteSchedule> {
        self.inner.schedule()
    }

    fn realization(&self) -> Realization {
        self.inner.realization()
    }

    fn candidate_hooks(&self) -> Vec<HookId> {
        self.inner.candidate_hooks()
    }

    fn dry_run_shapes(&self) -> Result<Vec<(HookId, Vec<usize>)>> {
        self.inner.dry_run_shapes()
    }

    fn affine_jacobian_trace(&self, hook: &HookId) -> Option<f64> {
        self.inner.affine_jacobian_trace(hook)
    }

    fn evaluate(&self, query: &Query<'_>, hooks: &[HookId]) -> Result<BackboneOutput> {
        let Some(key) = query.key else {
            return self.inner.evaluate(query, hooks);
        };
        let mut all = self.hooks.clone();
        for h in hooks {
            if !all.contains(h) {
                all.push(h.clone());
            }
        }
        let full = self.inner.evaluate(query, &all)?;
        let mut out = BackboneOutput {
            xhat0: full.xhat0.clone(),
            epshat: full.epshat.clone(),
            activations: BTreeMap::new(),
        };
        for h in hooks {
            out.activations.insert(h.clone(), full.activation(h)?.clone());
        }
        let mut stored = full;
        stored.activations.retain(|h, _| self.hooks.contains(h));
        self.store
            .lock()
            .unwrap()
            .entry((key, query.level.lambda.to_bits()))
            .or_insert(stored);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{TinyUNet, TinyUNetConfig};
    use crate::backbone::dump::{decode, encode};
    use crate::canonical::CanonicalLevel;
    use crate::rng::NoiseSource;

    #[test]
    fn record_then_replay_is_exact_at_single_precision() {
        let net = TinyUNet::new(TinyUNetConfig::new("u", 3)).unwrap();
        let schedule = net.schedule().cloned();
        let rec = RecordingBackbone::new(Box::new(net)).unwrap();
        let level = CanonicalLevel::from_timestep(schedule.as_ref().unwrap(), 20).unwrap();
        let hooks = list_admissible_hooks(&rec).unwrap();
        let mut live = Vec::new();
        for key in 0..3u64 {
            let x = NoiseSource::new(key).normal_tensor(&[0], &[1, 8, 8]);
            live.push((x.clone(), rec.evaluate(&Query::keyed(&x, &level, key), &hooks[1..3]).unwrap()));
        }
        assert_eq!(rec.passes(), 3);
        let records = decode(&encode(&rec.records()).unwrap()).unwrap();
        let replay =
            ReplayBackbone::from_records("r", records, vec![1, 8, 8], schedule, Realization::Vp).unwrap();
        assert_eq!(list_admissible_hooks(&replay).unwrap(), hooks);
        for (key, (x, out)) in live.iter().enumerate() {
            let got = replay
                .evaluate(&Query::keyed(x, &level, key as u64), &hooks[1..3])
                .unwrap();
            for (h, t) in &out.activations {
                let want: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
                assert_eq!(got.activations[h].data(), want.as_slice());
            }
        }
        let x = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(
            replay.evaluate(&Query::keyed(&x, &level, 99), &hooks),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(
            replay.evaluate(&Query::new(&x, &level), &hooks),
            Err(Error::Lookup(_))
        ));
    }
}

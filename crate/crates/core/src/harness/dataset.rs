//! Synthetic dataset specifications and their deterministic sample banks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::VectorSpec;
use crate::error::{Error, Result};
use crate::rng::{hash_str, purpose, stream_key, NoiseSource};
use crate::tensor::Tensor;
use crate::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianMixture,
    PlantedShift,
    /// Zero placeholders carrying the image ids of the live datasets; the
    /// replay backbone supplies the activations.
    DumpReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default = "zero_spec")]
    pub mean: VectorSpec,
    #[serde(default = "one_spec")]
    pub std: VectorSpec,
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

/// Mean shift added to every sample of a planted-shift dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShiftSpec {
    /// Norm `magnitude`, spread evenly over the flattened coordinates `dims`.
    Magnitude { magnitude: f64, dims: Vec<usize> },
    /// In units of the first component's per-coordinate std, optionally
    /// restricted to `dims`.
    Scaled {
        scaled: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
    },
    Vector { vector: VectorSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub role: Role,
    pub kind: DatasetKind,
    #[serde(default)]
    pub n_fit: usize,
    pub n_test: usize,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ComponentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftSpec>,
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::config(format!("dataset {}: {msg}", self.name)));
        if self.n_test == 0 {
            return err("n_test must be positive".into());
        }
        if self.role == Role::Id && self.n_fit < 2 {
            return err(format!("an id dataset needs n_fit ≥ 2, got {}", self.n_fit));
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return err(format!("invalid shape {:?}", self.shape));
        }
        match self.kind {
            DatasetKind::DumpReplay => {
                if !self.components.is_empty() || self.shift.is_some() {
                    return err("dump_replay takes no components or shift".into());
                }
            }
            DatasetKind::GaussianMixture | DatasetKind::PlantedShift => {
                if self.components.is_empty() {
                    return err("needs at least one component".into());
                }
                if self.components.iter().any(|c| !(c.weight > 0.0)) {
                    return err("component weights must be positive".into());
                }
                let d = self.dim();
                for c in &self.components {
                    c.mean.resolve(d)?;
                    if c.std.resolve(d)?.iter().any(|s| !(*s >= 0.0)) {
                        return err("component std must be nonnegative".into());
                    }
                }
                match (self.kind, &self.shift) {
                    (DatasetKind::PlantedShift, None) => return err("planted_shift needs `shift`".into()),
                    (DatasetKind::GaussianMixture, Some(_)) => {
                        return err("`shift` is only valid for planted_shift".into())
                    }
                    (_, Some(shift)) => {
                        self.shift_vector(shift)?;
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn shift_vector(&self, shift: &ShiftSpec) -> Result<Vec<f64>> {
        let d = self.dim();
        let check = |dims: &[usize]| -> Result<()> {
            if dims.is_empty() || dims.iter().any(|&j| j >= d) {
                return Err(Error::config(format!(
                    "dataset {}: shift dims must be nonempty and below {d}",
                    self.name
                )));
            }
            Ok(())
        };
        match shift {
            ShiftSpec::Magnitude { magnitude, dims } => {
                check(dims)?;
                let mut v = vec![0.0; d];
                let each = magnitude / (dims.len() as f64).sqrt();
                for &j in dims {
                    v[j] = each;
                }
                Ok(v)
            }
            ShiftSpec::Scaled { scaled, dims } => {
                let std = self.components[0].std.resolve(d)?;
                let mask: Vec<bool> = match dims {
                    Some(dims) => {
                        check(dims)?;
                        (0..d).map(|j| dims.contains(&j)).collect()
                    }
                    None => vec![true; d],
                };
                Ok(std
                    .iter()
                    .zip(mask)
                    .map(|(s, m)| if m { scaled * s } else { 0.0 })
                    .collect())
            }
            ShiftSpec::Vector { vector } => vector.resolve(d),
        }
    }

    /// The planted mean shift, zero for other kinds.
    pub fn shift(&self) -> Result<Vec<f64>> {
        match &self.shift {
            Some(s) => self.shift_vector(s),
            None => Ok(vec![0.0; self.dim()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Fit,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Fit => "fit",
            Split::Test => "test",
        }
    }
}

/// Stable id of sample `index` of a dataset split.
pub fn image_id(dataset: &str, split: Split, index: usize) -> u64 {
    stream_key(&[hash_str(dataset), split as u64, index as u64])
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    pub fit: Vec<Image>,
    pub test: Vec<Image>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Image] {
        match split {
            Split::Fit => &self.fit,
            Split::Test => &self.test,
        }
    }
}

struct Mixture {
    cumulative: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
}

impl Mixture {
    fn new(spec: &DatasetSpec) -> Result<Self> {
        let d = spec.dim();
        let shift = spec.shift()?;
        let total: f64 = spec.components.iter().map(|c| c.weight).sum();
        let mut acc = 0.0;
        let mut cumulative = Vec::new();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for c in &spec.components {
            acc += c.weight / total;
            cumulative.push(acc);
            let m = c.mean.resolve(d)?;
            means.push(m.iter().zip(&shift).map(|(a, b)| a + b).collect());
            stds.push(c.std.resolve(d)?);
        }
        Ok(Self { cumulative, means, stds })
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let k = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        self.means[k]
            .iter()
            .zip(&self.stds[k])
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }
}

/// Deterministic fit and test banks of `spec`.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let noise = NoiseSource::new(seed);
    let name_key = hash_str(&spec.name);
    let mixture = match spec.kind {
        DatasetKind::DumpReplay => None,
        _ => Some(Mixture::new(spec)?),
    };
    let draw = |split: Split, n: usize| -> Vec<Image> {
        (0..n)
            .map(|i| {
                let id = image_id(&spec.name, split, i);
                let x0 = match &mixture {
                    None => Tensor::zeros(&spec.shape),
                    Some(m) => {
                        let mut rng = noise.rng(&[purpose::DATA, name_key, split as u64, i as u64]);
                        Tensor::new(spec.shape.clone(), m.sample(&mut rng)).expect("shape matches dim")
                    }
                };
                Image::new(id, x0)
            })
            .collect()
    };
    Ok(Dataset {
        name: spec.name.clone(),
        role: spec.role,
        fit: draw(Split::Fit, spec.n_fit),
        test: draw(Split::Test, spec.n_test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind, shift: Option<ShiftSpec>) -> DatasetSpec {
        DatasetSpec {
            name: "d".into(),
            role: Role::Id,
            kind,
            n_fit: 3,
            n_test: 2,
            shape: vec![1, 2, 2],
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: VectorSpec::Scalar(0.0),
                std: VectorSpec::Values(vec![1.0, 2.0, 3.0, 4.0]),
            }],
            shift,
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let s = spec(DatasetKind::GaussianMixture, None);
        let a = make_dataset(&s, 5).unwrap();
        let b = make_dataset(&s, 5).unwrap();
        assert_eq!(a.fit, b.fit);
        assert_eq!(a.test, b.test);
        assert_eq!((a.fit.len(), a.test.len()), (3, 2));
        assert!(a.fit.iter().all(|f| a.test.iter().all(|t| t.id != f.id)));
        assert_ne!(make_dataset(&s, 6).unwrap().fit, a.fit);
    }

    #[test]
    fn shifts() {
        let s = spec(
            DatasetKind::PlantedShift,
            Some(ShiftSpec::Magnitude { magnitude: 2.0, dims: vec![0, 3] }),
        );
        let v = s.shift().unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 4.0).abs() < 1e-12);
        assert_eq!((v[1], v[2]), (0.0, 0.0));
        let s = spec(DatasetKind::PlantedShift, Some(ShiftSpec::Scaled { scaled: 0.5, dims: None }));
        assert_eq!(s.shift().unwrap(), vec![0.5, 1.0, 1.5, 2.0]);
        let s = spec(
            DatasetKind::PlantedShift,
            Some(ShiftSpec::Magnitude { magnitude: 1.0, dims: vec![4] }),
        );
        assert!(s.validate().is_err());
    }

    #[test]
    fn count_and_kind_checks() {
        let mut s = spec(DatasetKind::GaussianMixture, None);
        s.n_test = 0;
        assert!(matches!(make_dataset(&s, 0), Err(Error::Config(_))));
        let mut s = spec(DatasetKind::GaussianMixture, None);
        s.n_fit = 0;
        assert!(s.validate().is_err());
        s.role = Role::Ood;
        assert!(s.validate().is_ok());
        assert!(spec(DatasetKind::PlantedShift, None).validate().is_err());
    }

    #[test]
    fn replay_placeholders_share_ids() {
        let live = spec(DatasetKind::GaussianMixture, None);
        let mut replay = live.clone();
        replay.kind = DatasetKind::DumpReplay;
        replay.components.clear();
        let (a, b) = (make_dataset(&live, 1).unwrap(), make_dataset(&replay, 9).unwrap());
        assert!(a.test.iter().zip(&b.test).all(|(x, y)| x.id == y.id));
        assert!(b.test.iter().all(|im| im.x0.data().iter().all(|v| *v == 0.0)));
    }
}

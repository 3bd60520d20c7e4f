use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{unknown_hook, Backbone, BackboneOutput, HookId, Query, Region};
use crate::canonical::{DiscreteSchedule, Realization};
use crate::config::{LinearBetaSpec, ScheduleSpec};
use crate::error::{Error, Result};
use crate::rng::{purpose, NoiseSource};
use crate::tensor::Tensor;

const TEMB: usize = 8;
const GAIN: f64 = 1.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyUNetConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shape")]
    pub shape: Vec<usize>,
    /// Channel count of the first encoder stage; deeper stages use twice it.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Option<ScheduleSpec>,
    /// Adds `decoder.2.noise`, a high-pass residual of the input that
    /// carries almost no content at low noise.
    #[serde(default)]
    pub planted_noise_hook: bool,
}

fn default_shape() -> Vec<usize> {
    vec![1, 8, 8]
}

fn default_width() -> usize {
    4
}

fn default_schedule() -> Option<ScheduleSpec> {
    Some(ScheduleSpec::LinearBeta(LinearBetaSpec {
        linear_beta: [1e-4, 0.02],
        steps: 1000,
    }))
}

impl TinyUNetConfig {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            seed,
            shape: default_shape(),
            width: default_width(),
            schedule: default_schedule(),
            planted_noise_hook: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    cin: usize,
    cout: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    time: Vec<f64>,
}

impl Conv {
    fn new(seed: u64, layer: u64, cin: usize, cout: usize) -> Self {
        let mut rng = NoiseSource::new(seed).rng(&[purpose::WEIGHTS, layer]);
        let bound = GAIN * (3.0 / (cin * 9) as f64).sqrt();
        let weight = (0..cout * cin * 9)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
        let tb = (3.0 / TEMB as f64).sqrt() * 0.5;
        let time = (0..cout * TEMB).map(|_| rng.random_range(-tb..tb)).collect();
        Self {
            cin,
            cout,
            weight,
            bias,
            time,
        }
    }

    /// 3×3 convolution, zero padding, plus a per-channel time bias.
    fn apply(&self, x: &[f64], h: usize, w: usize, temb: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let plane = h * w;
        // im2col: row (ci, ky, kx) holds the shifted, zero-padded input plane.
        let mut cols = vec![0.0; self.cin * 9 * plane];
        for ci in 0..self.cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let srow = &src[(sy - 1) * w..sy * w];
                        let drow = &mut row[y * w..(y + 1) * w];
                        let (x0, x1) = (usize::from(kx == 0), if kx == 2 { w - 1 } else { w });
                        for xx in x0..x1 {
                            drow[xx] = srow[xx + kx - 1];
                        }
                    }
                }
            }
        }
        let taps = self.cin * 9;
        let mut out = vec![0.0; self.cout * plane];
        for co in 0..self.cout {
            let shift = self.bias[co]
                + self.time[co * TEMB..(co + 1) * TEMB]
                    .iter()
                    .zip(temb)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let dst = &mut out[co * plane..(co + 1) * plane];
            dst.iter_mut().for_each(|v| *v = shift);
            for (wv, col) in self.weight[co * taps..(co + 1) * taps]
                .iter()
                .zip(cols.chunks_exact(plane))
            {
                for (d, c) in dst.iter_mut().zip(col) {
                    *d += wv * c;
                }
            }
        }
        out
    }
}

fn silu(v: &mut [f64]) {
    for x in v {
        *x /= 1.0 + (-*x).exp();
    }
}

fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ch * ho * wo + y * wo + xx] = s / 4.0;
            }
        }
    }
    out
}

fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h * 2, w * 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out[ch * ho * wo + y * wo + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Input minus its 3×3 box blur (replicate padding), per channel.
fn high_pass(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (xx as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        s += x[base + sy * w + sx];
                    }
                }
                out[base + y * w + xx] = x[base + y * w + xx] - s / 9.0;
            }
        }
    }
    out
}

fn time_embedding(lambda: f64) -> [f64; TEMB] {
    let mut e = [0.0; TEMB];
    for j in 0..TEMB / 2 {
        let f = 0.5f64.powi(j as i32);
        e[2 * j] = (lambda * f).sin();
        e[2 * j + 1] = (lambda * f).cos();
    }
    e
}

/// Small frozen convolutional U-Net with random weights.
///
/// Two encoder stages, one middle stage and two decoder stages with skip
/// connections. The network predicts `ε̂` natively and derives
/// `x̂₀ = (x − b·ε̂)/a`. Weights are drawn from a counter-keyed stream per
/// layer, so a seed fully determines the network.
#[derive(Debug, Clone)]
pub struct TinyUNet {
    config: TinyUNetConfig,
    schedule: Option<DiscreteSchedule>,
    enc0: Conv,
    enc1: Conv,
    mid: Conv,
    dec0: Conv,
    dec1: Conv,
    head: Conv,
}

impl TinyUNet {
    pub fn new(config: TinyUNetConfig) -> Result<Self> {
        let [c, h, w] = <[usize; 3]>::try_from(config.shape.as_slice())
            .map_err(|_| Error::config("tinyunet shape must be [C, H, W]"))?;
        if c == 0 || h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!(
                "tinyunet needs even spatial dims ≥ 2, got {:?}",
                config.shape
            )));
        }
        let width = config.width;
        if width == 0 {
            return Err(Error::config("tinyunet width must be positive"));
        }
        let s = config.seed;
        let schedule = config.schedule.as_ref().map(|s| s.resolve()).transpose()?;
        Ok(Self {
            enc0: Conv::new(s, 0, c, width),
            enc1: Conv::new(s, 1, width, 2 * width),
            mid: Conv::new(s, 2, 2 * width, 2 * width),
            dec0: Conv::new(s, 3, 4 * width, 2 * width),
            dec1: Conv::new(s, 4, 3 * width, width),
            head: Conv::new(s, 5, width, c),
            schedule,
            config,
        })
    }

    fn planted_hook() -> HookId {
        HookId::named(Region::Decoder, 2, "decoder.2.noise")
    }

    fn embedding_hook() -> HookId {
        HookId::named(Region::Middle, 0, "middle.embedding")
    }
}

impl Backbone for TinyUNet {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn input_shape(&self) -> &[usize] {
        &self.config.shape
    }

    fn schedule(&self) -> Option<&DiscreteSchedule> {
        self.schedule.as_ref()
    }

    fn realization(&self) -> Realization {
        Realization::Vp
    }

    fn candidate_hooks(&self) -> Vec<HookId> {
        let mut hooks = vec![
            HookId::new(Region::Encoder, 0),
            HookId::new(Region::Encoder, 1),
            HookId::new(Region::Middle, 0),
            Self::embedding_hook(),
            HookId::new(Region::Decoder, 0),
            HookId::new(Region::Decoder, 1),
        ];
        if self.config.planted_noise_hook {
            hooks.push(Self::planted_hook());
        }
        hooks
    }

    fn evaluate(&self, query: &Query<'_>, hooks: &[HookId]) -> Result<BackboneOutput> {
        let x = query.input;
        if x.shape() != self.config.shape.as_slice() {
            return Err(Error::domain(format!(
                "input shape {:?}, backbone expects {:?}",
                x.shape(),
                self.config.shape
            )));
        }
        let candidates = self.candidate_hooks();
        if let Some(bad) = hooks.iter().find(|h| !candidates.contains(h)) {
            return Err(unknown_hook(self.name(), bad));
        }
        let level = query.level;
        if !(level.a > 0.0) {
            return Err(Error::domain("tinyunet needs a > 0"));
        }
        let (c, h, w) = (self.config.shape[0], self.config.shape[1], self.config.shape[2]);
        let (h2, w2) = (h / 2, w / 2);
        let wd = self.config.width;
        let temb = time_embedding(level.lambda.clamp(-30.0, 30.0));

        let mut e0 = self.enc0.apply(x.data(), h, w, &temb);
        silu(&mut e0);
        let pooled = avgpool2(&e0, wd, h, w);
        let mut e1 = self.enc1.apply(&pooled, h2, w2, &temb);
        silu(&mut e1);
        let mut m = self.mid.apply(&e1, h2, w2, &temb);
        silu(&mut m);
        let cat0 = [m.as_slice(), e1.as_slice()].concat();
        let mut d0 = self.dec0.apply(&cat0, h2, w2, &temb);
        silu(&mut d0);
        let up = upsample2(&d0, 2 * wd, h2, w2);
        let cat1 = [up.as_slice(), e0.as_slice()].concat();
        let mut d1 = self.dec1.apply(&cat1, h, w, &temb);
        silu(&mut d1);
        let eps = self.head.apply(&d1, h, w, &temb);

        let epshat = Tensor::new(x.shape().to_vec(), eps)?;
        let (a, b) = (level.a, level.b);
        let xhat0 = x.zip_map(&epshat, |xv, e| (xv - b * e) / a)?;

        let mut activations = BTreeMap::new();
        for hook in hooks {
            let t = match (hook.region, hook.name.as_str()) {
                (_, "encoder.0") => Tensor::new(vec![wd, h, w], e0.clone())?,
                (_, "encoder.1") => Tensor::new(vec![2 * wd, h2, w2], e1.clone())?,
                (_, "middle.0") => Tensor::new(vec![2 * wd, h2, w2], m.clone())?,
                (_, "middle.embedding") => Tensor::from_vec(temb.to_vec()),
                (_, "decoder.0") => Tensor::new(vec![2 * wd, h2, w2], d0.clone())?,
                (_, "decoder.1") => Tensor::new(vec![wd, h, w], d1.clone())?,
                (_, "decoder.2.noise") => Tensor::new(vec![c, h, w], high_pass(x.data(), c, h, w))?,
                _ => return Err(unknown_hook(self.name(), hook)),
            };
            activations.insert(hook.clone(), t);
        }
        Ok(BackboneOutput {
            xhat0,
            epshat,
            activations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::list_admissible_hooks;
    use crate::canonical::CanonicalLevel;

    #[test]
    fn five_admissible_hooks() {
        let net = TinyUNet::new(TinyUNetConfig::new("unet", 1)).unwrap();
        let names: Vec<String> = list_admissible_hooks(&net)
            .unwrap()
            .into_iter()
            .map(|h| h.name)
            .collect();
        assert_eq!(
            names,
            ["encoder.0", "encoder.1", "middle.0", "decoder.0", "decoder.1"]
        );
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let cfg = TinyUNetConfig::new("unet", 5);
        let net = TinyUNet::new(cfg.clone()).unwrap();
        let again = TinyUNet::new(cfg).unwrap();
        let other = TinyUNet::new(TinyUNetConfig::new("unet", 6)).unwrap();
        let x = NoiseSource::new(1).normal_tensor(&[0], &[1, 8, 8]);
        let level = CanonicalLevel::from_timestep(net.schedule().unwrap(), 40).unwrap();
        let hooks = net.candidate_hooks();
        let q = Query::new(&x, &level);
        let a = net.evaluate(&q, &hooks).unwrap();
        assert_eq!(a, net.evaluate(&q, &hooks).unwrap());
        assert_eq!(a, again.evaluate(&q, &hooks).unwrap());
        assert_ne!(a.epshat, other.evaluate(&q, &hooks).unwrap().epshat);
        let back = x.zip_map(&a.xhat0, |xv, x0| (xv - level.a * x0) / level.b).unwrap();
        for (e, r) in a.epshat.data().iter().zip(back.data()) {
            assert!((e - r).abs() < 1e-9);
        }
    }

    #[test]
    fn planted_hook_is_shift_invariant() {
        let mut cfg = TinyUNetConfig::new("unet", 2);
        cfg.planted_noise_hook = true;
        let net = TinyUNet::new(cfg).unwrap();
        let level = CanonicalLevel::from_timestep(net.schedule().unwrap(), 10).unwrap();
        let hook = TinyUNet::planted_hook();
        let out = net
            .evaluate(&Query::new(&Tensor::filled(&[1, 8, 8], 3.0), &level), std::slice::from_ref(&hook))
            .unwrap();
        assert!(out.activations[&hook].data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(list_admissible_hooks(&net).unwrap().len(), 6);
    }

    #[test]
    fn rejects_odd_shapes() {
        let mut cfg = TinyUNetConfig::new("unet", 0);
        cfg.shape = vec![1, 7, 8];
        assert!(TinyUNet::new(cfg).is_err());
    }
}

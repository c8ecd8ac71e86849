//! Rate coding, LIF dynamics, ANN-to-SNN conversion and spiking simulation.

mod convert;
mod sim;

pub use convert::{convert_ann_to_snn, percentile_positive, ConversionConfig, ScaleRecord, CONVERSION_PERCENTILE};
pub use sim::{
    ac_count, ac_count_synaptic, lif_op_count, snn_forward, write_spike_stats_csv, ExitDecision, LayerSpikes, SampleRun,
    SnnBranch, SnnLayer, SpikeStats, SpikeTotals, SpikingNetwork, SynapticEvents,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    Subtract,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifConfig {
    pub beta: f64,
    pub theta: f64,
    pub reset: ResetMode,
    pub timesteps: usize,
    /// Initial membrane potential as a fraction of `theta`.
    pub init_fraction: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            beta: 0.95,
            theta: 1.0,
            reset: ResetMode::Subtract,
            timesteps: 32,
            init_fraction: 0.5,
        }
    }
}

impl LifConfig {
    /// Membrane potential every LIF neuron starts from.
    pub fn initial_membrane(&self) -> f64 {
        self.init_fraction * self.theta
    }

    /// Defaults with the short window used by quantized variants.
    pub fn quantized() -> Self {
        LifConfig {
            timesteps: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("LIF beta must lie in (0, 1), got {}", self.beta)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!("LIF threshold must be positive, got {}", self.theta)));
        }
        if !(0.0..1.0).contains(&self.init_fraction) {
            return Err(Error::Config(format!("initial membrane fraction must lie in [0, 1), got {}", self.init_fraction)));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One LIF update: `U <- beta·U + I`, spike where `U >= theta`, then reset.
pub fn lif_step(cfg: &LifConfig, state: &[f64], current: &[f64]) -> Result<(Vec<bool>, Vec<f64>)> {
    if state.len() != current.len() {
        return Err(Error::shape("lif_step", state.len(), current.len()));
    }
    let mut u = state.to_vec();
    let mut spikes = vec![false; u.len()];
    lif_step_in_place(cfg, &mut u, current, &mut spikes);
    Ok((spikes, u))
}

#[inline]
pub(crate) fn lif_step_in_place<S: From<bool>>(cfg: &LifConfig, u: &mut [f64], current: &[f64], spikes: &mut [S]) {
    for ((u, &i), s) in u.iter_mut().zip(current).zip(spikes) {
        *u = cfg.beta * *u + i;
        let fire = *u >= cfg.theta;
        if fire {
            *u = match cfg.reset {
                ResetMode::Subtract => *u - cfg.theta,
                ResetMode::Zero => 0.0,
            };
        }
        *s = S::from(fire);
    }
}

/// Binary spikes over `timesteps`, laid out `(T, neuron dims...)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub timesteps: usize,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
    pub seed: u64,
    /// Identifies the encoded sample in traces and statistics.
    pub sample_id: u64,
}

impl SpikeTrain {
    pub fn neurons(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn at(&self, t: usize) -> &[u8] {
        let n = self.neurons();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn total_spikes(&self) -> u64 {
        self.data.iter().map(|&s| s as u64).sum()
    }

    /// Spikes as a `(T, shape...)` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![self.timesteps];
        shape.extend(&self.shape);
        Tensor::new(shape, self.data.iter().map(|&s| s as f64).collect()).expect("spike train shape")
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Encoding seed of one sample, so every variant sees the same spikes.
pub fn sample_seed(base: u64, sample_id: u64) -> u64 {
    splitmix64(base ^ splitmix64(sample_id))
}

/// Bernoulli rate code: each pixel spikes with probability equal to its value.
pub fn encode_rate(image: &Tensor, timesteps: usize, seed: u64) -> Result<SpikeTrain> {
    if let Some(&bad) = image.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Range { value: bad, lo: 0.0, hi: 1.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(timesteps * image.len());
    for _ in 0..timesteps {
        data.extend(image.data().iter().map(|&p| u8::from(rng.random::<f64>() < p)));
    }
    Ok(SpikeTrain {
        timesteps,
        shape: image.shape().to_vec(),
        data,
        seed,
        sample_id: 0,
    })
}

/// Encodes dataset sample `sample_id` with its per-sample seed.
pub fn encode_sample(image: &Tensor, timesteps: usize, base_seed: u64, sample_id: u64) -> Result<SpikeTrain> {
    let mut train = encode_rate(image, timesteps, sample_seed(base_seed, sample_id))?;
    train.sample_id = sample_id;
    Ok(train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lif_threshold_exact() {
        let cfg = LifConfig::default();
        let (s, u) = lif_step(&cfg, &[0.0], &[1.0]).unwrap();
        assert_eq!(s, vec![true]);
        assert_eq!(u, vec![0.0]);
        let zero = LifConfig {
            reset: ResetMode::Zero,
            ..cfg
        };
        let (s, u) = lif_step(&zero, &[0.5], &[2.0]).unwrap();
        assert!(s[0]);
        assert_eq!(u[0], 0.0);
        assert!(lif_step(&cfg, &[0.0], &[]).is_err());
    }

    #[test]
    fn lif_silent_without_input() {
        let cfg = LifConfig::default();
        let mut u = vec![0.0];
        for _ in 0..100 {
            let (s, next) = lif_step(&cfg, &u, &[0.0]).unwrap();
            assert!(!s[0]);
            u = next;
        }
    }

    #[test]
    fn lif_hand_trace() {
        // U: 0.6, 0.9, 1.05 -> first spike on the third step
        let cfg = LifConfig {
            beta: 0.5,
            ..LifConfig::default()
        };
        let mut u = vec![0.0];
        let mut first = None;
        for t in 1..=5 {
            let (s, next) = lif_step(&cfg, &u, &[0.6]).unwrap();
            if s[0] && first.is_none() {
                first = Some(t);
                assert!((next[0] - 0.05).abs() < 1e-12);
            }
            u = next;
        }
        assert_eq!(first, Some(3));
    }

    #[test]
    fn encode_extremes_and_rate() {
        let img = Tensor::new(vec![3], vec![0.0, 1.0, 0.5]).unwrap();
        let tr = encode_rate(&img, 10_000, 42).unwrap();
        let counts: Vec<u64> = (0..3).map(|j| (0..10_000).map(|t| tr.at(t)[j] as u64).sum()).collect();
        assert_eq!(counts[0], 0);
        assert_eq!(counts[1], 10_000);
        assert!((counts[2] as f64 / 10_000.0 - 0.5).abs() <= 0.02);
        assert_eq!(tr, encode_rate(&img, 10_000, 42).unwrap());
        let bad = Tensor::new(vec![1], vec![1.2]).unwrap();
        assert!(matches!(encode_rate(&bad, 4, 0), Err(Error::Range { .. })));
    }

    #[test]
    fn config_validation() {
        LifConfig::default().validate().unwrap();
        assert_eq!(LifConfig::quantized().timesteps, 4);
        assert!(LifConfig { beta: 1.0, ..Default::default() }.validate().is_err());
        assert!(LifConfig { theta: 0.0, ..Default::default() }.validate().is_err());
        assert!(LifConfig { timesteps: 0, ..Default::default() }.validate().is_err());
    }
}

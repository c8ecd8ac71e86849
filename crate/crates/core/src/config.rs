//! TOML run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::arch::Architecture;
use crate::ann::train::TrainConfig;
use crate::error::{Error, Result};
use crate::exit::ThresholdConfig;
use crate::quant::QatConfig;
use crate::rl::RlHyper;
use crate::snn::LifConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionSection {
    /// Training samples used to measure activation scales.
    pub calibration_samples: usize,
    pub percentile: f64,
    /// Window of the quantized variants; the baseline uses `lif.timesteps`.
    pub quantized_timesteps: usize,
}

impl Default for ConversionSection {
    fn default() -> Self {
        ConversionSection {
            calibration_samples: 2_000,
            percentile: crate::snn::CONVERSION_PERCENTILE,
            quantized_timesteps: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySection {
    /// Training samples whose exit outcomes the agent replays.
    pub samples: usize,
    pub hyper: RlHyper,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            samples: 10_000,
            hyper: RlHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Test samples evaluated; 0 means the whole split.
    pub test_samples: usize,
    /// Samples simulated together.
    pub batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            test_samples: 0,
            batch: 100,
        }
    }
}

/// Thresholds checked in `--strict` mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateSection {
    pub ann_min_accuracy: f64,
    pub snn_min_accuracy: f64,
    pub qsnn_min_accuracy: f64,
    /// Allowed accuracy drop of dynamic variants versus their full-depth baseline.
    pub dominance_tolerance: f64,
    pub max_ops_ratio: f64,
    pub min_exit_fraction: f64,
    pub min_populated_exits: usize,
}

impl Default for GateSection {
    fn default() -> Self {
        GateSection {
            ann_min_accuracy: 0.975,
            snn_min_accuracy: 0.93,
            qsnn_min_accuracy: 0.92,
            dominance_tolerance: 0.01,
            max_ops_ratio: 0.5,
            min_exit_fraction: 0.05,
            min_populated_exits: 2,
        }
    }
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_thresholds() -> ThresholdConfig {
    ThresholdConfig {
        thresholds: vec![0.6, 0.7],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Mandatory; propagated to training, encoding and policy learning.
    pub seed: u64,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub qat: QatConfig,
    #[serde(default)]
    pub lif: LifConfig,
    #[serde(default)]
    pub conversion: ConversionSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default = "default_thresholds")]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub gates: GateSection,
}

fn default_architecture() -> Architecture {
    Architecture::Mlp
}

impl RunConfig {
    /// Defaults for an architecture (LeNet trains for 30 epochs).
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        let mut cfg = RunConfig {
            seed,
            architecture,
            data_dir: default_data_dir(),
            out_dir: default_out_dir(),
            train: TrainConfig::default(),
            qat: QatConfig::default(),
            lif: LifConfig::default(),
            conversion: ConversionSection::default(),
            policy: PolicySection::default(),
            thresholds: default_thresholds(),
            eval: EvalSection::default(),
            gates: GateSection::default(),
        };
        if architecture == Architecture::Lenet {
            cfg.train.epochs = 30;
        }
        cfg.set_seed(seed);
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.into()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the run seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.qat.train.seed = seed.wrapping_add(1);
        self.policy.hyper.seed = seed;
    }

    /// Seed of the rate encoder; shared by every spiking variant.
    pub fn encode_seed(&self) -> u64 {
        self.seed
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture == Architecture::Alexnet {
            return Err(Error::Config("alexnet is profiled only; train mlp or lenet".into()));
        }
        if !self.data_dir.is_dir() {
            return Err(Error::MissingArtifact(self.data_dir.clone()));
        }
        self.train.validate()?;
        self.qat.train.validate()?;
        self.lif.validate()?;
        self.policy.hyper.validate()?;
        self.thresholds.validate()?;
        if self.conversion.calibration_samples == 0 {
            return Err(Error::Config("calibration_samples must be at least 1".into()));
        }
        if self.conversion.quantized_timesteps == 0 {
            return Err(Error::Config("quantized_timesteps must be at least 1".into()));
        }
        if self.policy.samples == 0 {
            return Err(Error::Config("policy samples must be at least 1".into()));
        }
        Ok(())
    }

    /// LIF settings of the baseline or the quantized variants.
    pub fn lif_for(&self, quantized: bool) -> LifConfig {
        LifConfig {
            timesteps: if quantized {
                self.conversion.quantized_timesteps
            } else {
                self.lif.timesteps
            },
            ..self.lif
        }
    }
}

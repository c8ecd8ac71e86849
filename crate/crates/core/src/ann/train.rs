//! Adam with cosine annealing, mixup, joint multi-exit training and evaluation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::ann::arch::NetworkSpec;
use crate::ann::network::{joint_loss, BranchyNetwork, Grads, Targets};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{argmax_unchecked, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate reached at the end of the cosine horizon.
    pub lr_floor: f64,
    /// Cosine horizon in optimizer steps; 0 means "all steps of this run".
    pub horizon_steps: usize,
    pub mixup_alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// One weight per decision point; empty means 1.0 everywhere.
    pub exit_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 1e-3,
            lr_floor: 0.0,
            horizon_steps: 0,
            mixup_alpha: 0.2,
            batch_size: 64,
            seed: 0,
            exit_weights: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return Err(Error::Config(format!("lr_floor must lie in [0, lr], got {}", self.lr_floor)));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!("mixup alpha must be >= 0, got {}", self.mixup_alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn exit_weights_for(&self, exits: usize) -> Result<Vec<f64>> {
        if self.exit_weights.is_empty() {
            return Ok(vec![1.0; exits]);
        }
        if self.exit_weights.len() != exits {
            return Err(Error::Config(format!(
                "{} exit loss weights given for {exits} exits",
                self.exit_weights.len()
            )));
        }
        Ok(self.exit_weights.clone())
    }
}

/// `floor + (base - floor)·½(1 + cos(π·step/horizon))`, held at `floor` past the horizon.
pub fn cosine_lr(base: f64, floor: f64, step: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return base;
    }
    let progress = step.min(horizon) as f64 / horizon as f64;
    floor + (base - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(spec: &NetworkSpec) -> Self {
        let zeros: Grads = spec
            .layers()
            .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, spec: &mut NetworkSpec, grads: &Grads, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((layer, g), m), v) in spec.layers_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, g), m), v) in layer.params_mut().into_iter().zip(g).zip(m).zip(v) {
                let iter = p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                for ((p, &g), (m, v)) in iter {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

pub struct Mixup {
    pub x: Tensor,
    pub partner: Vec<usize>,
    pub lambda: f64,
}

/// `λ·x + (1-λ)·x[perm]` with `λ ~ Beta(α, α)`; `α = 0` means `λ = 1`.
pub fn mixup(x: &Tensor, labels: &[usize], alpha: f64, rng: &mut impl Rng) -> Result<Mixup> {
    let n = labels.len();
    if n < 2 || x.shape()[0] != n {
        return Err(Error::Usage(format!("mixup needs a batch of at least 2, got {n}")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("mixup alpha must be >= 0, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(Mixup {
            x: x.clone(),
            partner: labels.to_vec(),
            lambda: 1.0,
        });
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?
        .sample(rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let d = x.len() / n;
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    for (s, &p) in perm.iter().enumerate() {
        let a = &src[s * d..(s + 1) * d];
        let b = &src[p * d..(p + 1) * d];
        out.extend(a.iter().zip(b).map(|(a, b)| lambda * a + (1.0 - lambda) * b));
    }
    Ok(Mixup {
        x: Tensor::new(x.shape().to_vec(), out)?,
        partner: perm.iter().map(|&p| labels[p]).collect(),
        lambda,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub lr_end: f64,
    /// Accuracy of each exit on the (unmixed) training labels.
    pub train_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
}

/// Optimizer state carried across calls so that schedules continue.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub steps: usize,
    pub horizon: usize,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(net: &BranchyNetwork, cfg: &TrainConfig, samples: usize) -> Result<Self> {
        cfg.validate()?;
        let per_epoch = samples.div_ceil(cfg.batch_size);
        Ok(Trainer {
            cfg: cfg.clone(),
            adam: Adam::new(&net.spec),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            steps: 0,
            horizon: if cfg.horizon_steps > 0 { cfg.horizon_steps } else { per_epoch * cfg.epochs },
            epochs_done: 0,
        })
    }

    /// One pass over `ds`. `observe` keeps quantization observers updating.
    pub fn epoch(&mut self, net: &mut BranchyNetwork, ds: &Dataset, observe: bool) -> Result<EpochMetrics> {
        let weights = self.cfg.exit_weights_for(net.exit_count())?;
        let epoch = self.epochs_done;
        let shuffle_seed = self.rng.random::<u64>();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut correct = vec![0usize; net.exit_count()];
        let mut lr = self.cfg.lr;
        for (step, batch) in batches(ds, self.cfg.batch_size, shuffle_seed, true)?.enumerate() {
            let n = batch.labels.len();
            let mixed = if n >= 2 && self.cfg.mixup_alpha > 0.0 {
                Some(mixup(&batch.x, &batch.labels, self.cfg.mixup_alpha, &mut self.rng)?)
            } else {
                None
            };
            let x = mixed.as_ref().map_or(&batch.x, |m| &m.x);
            let targets = match &mixed {
                Some(m) => Targets {
                    labels: &batch.labels,
                    mixed_with: Some(&m.partner),
                    lambda: m.lambda,
                },
                None => Targets::hard(&batch.labels),
            };
            let (logits, tape) = net.forward_train(x, observe)?;
            let (loss, dlogits) = joint_loss(&logits, targets, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            for (e, z) in logits.iter().enumerate() {
                let classes = z.shape()[1];
                correct[e] += z
                    .data()
                    .chunks(classes)
                    .zip(&batch.labels)
                    .filter(|(row, &y)| argmax_unchecked(row) == y)
                    .count();
            }
            let grads = net.backward(&tape, dlogits)?;
            lr = cosine_lr(self.cfg.lr, self.cfg.lr_floor, self.steps, self.horizon);
            self.adam.update(&mut net.spec, &grads, lr);
            self.steps += 1;
            if !net.spec.layers().all(|l| l.params().iter().all(|p| p.is_finite())) {
                return Err(Error::Divergence { epoch, step });
            }
            loss_sum += loss * n as f64;
            seen += n;
        }
        self.epochs_done += 1;
        Ok(EpochMetrics {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            lr_end: lr,
            train_accuracy: correct.iter().map(|&c| c as f64 / seen.max(1) as f64).collect(),
        })
    }
}

/// Trains all exits jointly for `cfg.epochs` epochs.
pub fn train_ann(net: &mut BranchyNetwork, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_ann_with(net, ds, cfg, |_| {})
}

/// As [`train_ann`], reporting each epoch to `progress`.
pub fn train_ann_with(
    net: &mut BranchyNetwork,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainHistory> {
    let mut trainer = Trainer::new(net, cfg, ds.len())?;
    let mut history = TrainHistory::default();
    for _ in 0..cfg.epochs {
        let m = trainer.epoch(net, ds, false)?;
        progress(&m);
        history.epochs.push(m);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Accuracy per decision point, final classifier last.
    pub accuracy: Vec<f64>,
    /// `confusion[exit][label][predicted]`.
    pub confusion: Vec<Vec<Vec<u64>>>,
    pub mean_loss: f64,
}

impl EvalReport {
    pub fn final_accuracy(&self) -> f64 {
        *self.accuracy.last().expect("at least one exit")
    }
}

pub fn eval_ann(net: &BranchyNetwork, ds: &Dataset) -> Result<EvalReport> {
    let exits = net.exit_count();
    let classes = net.spec.classes;
    let mut confusion = vec![vec![vec![0u64; classes]; classes]; exits];
    let mut loss = 0.0;
    let weights = vec![1.0 / exits as f64; exits];
    for batch in batches(ds, 500, 0, false)? {
        let logits = net.forward_eval(&batch.x)?;
        let (l, _) = joint_loss(&logits, Targets::hard(&batch.labels), &weights)?;
        loss += l * batch.labels.len() as f64;
        for (e, z) in logits.iter().enumerate() {
            for (row, &y) in z.data().chunks(classes).zip(&batch.labels) {
                confusion[e][y][argmax_unchecked(row)] += 1;
            }
        }
    }
    let n = ds.len().max(1);
    let accuracy = confusion
        .iter()
        .map(|c| (0..classes).map(|k| c[k][k]).sum::<u64>() as f64 / n as f64)
        .collect();
    Ok(EvalReport {
        samples: ds.len(),
        accuracy,
        confusion,
        mean_loss: loss / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::arch::build_mlp;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0.0, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 1e-5, 100, 100) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 1e-5, 500, 100) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 0.0, 50, 100) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut spec = build_mlp(1);
        let before = spec.clone();
        let mut adam = Adam::new(&spec);
        let zeros: Grads = spec
            .layers()
            .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        adam.update(&mut spec, &zeros, 1e-3);
        assert_eq!(spec, before);
    }

    #[test]
    fn mixup_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![3, 2], vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.0]).unwrap();
        let m = mixup(&x, &[0, 1, 2], 0.0, &mut rng).unwrap();
        assert_eq!(m.lambda, 1.0);
        assert_eq!(m.x, x);
        let m = mixup(&x, &[0, 1, 2], 0.2, &mut rng).unwrap();
        assert!(m.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let same = Tensor::full(&[2, 2], 0.3);
        let m = mixup(&same, &[0, 1], 1.0, &mut rng).unwrap();
        assert!(m.x.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert!(mixup(&Tensor::zeros(&[1, 2]), &[0], 0.2, &mut rng).is_err());
    }
}

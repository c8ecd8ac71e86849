//! Branchy ANN forward/backward passes with optional fake quantization.

use serde::{Deserialize, Serialize};

use crate::ann::arch::NetworkSpec;
use crate::error::{Error, Result};
use crate::layer::{Cache, Layer};
use crate::quant::{act_site, head_prefix, weight_site, QuantState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchyNetwork {
    pub spec: NetworkSpec,
    pub quant: Option<QuantState>,
}

/// Outputs of every layer for one batch, in inference mode.
#[derive(Clone, Debug)]
pub struct Activations {
    pub backbone: Vec<Tensor>,
    pub heads: Vec<Vec<Tensor>>,
}

impl Activations {
    /// Logits of every decision point: early exits in depth order, then the final classifier.
    pub fn logits(&self) -> Vec<&Tensor> {
        self.heads
            .iter()
            .map(|h| h.last().expect("non-empty head"))
            .chain(self.backbone.last())
            .collect()
    }
}

struct LayerTape {
    cache: Cache,
    weight: Option<Tensor>,
    mask: Option<Vec<bool>>,
}

pub(crate) struct Tape {
    backbone: Vec<LayerTape>,
    heads: Vec<Vec<LayerTape>>,
}

/// Parameter gradients, one entry per layer in [`NetworkSpec::layers`] order.
pub type Grads = Vec<Vec<Tensor>>;

/// Mixed targets: `lambda` weight on `labels`, `1 - lambda` on `mixed_with`.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub labels: &'a [usize],
    pub mixed_with: Option<&'a [usize]>,
    pub lambda: f64,
}

impl<'a> Targets<'a> {
    pub fn hard(labels: &'a [usize]) -> Self {
        Targets {
            labels,
            mixed_with: None,
            lambda: 1.0,
        }
    }
}

fn train_step(
    layer: &mut Layer,
    prefix: &str,
    i: usize,
    quant: &mut Option<QuantState>,
    x: &Tensor,
    observe: bool,
) -> Result<(Tensor, LayerTape)> {
    let weight = match (quant.as_mut(), layer.weight()) {
        (Some(q), Some(w)) => q.weight(&weight_site(prefix, i), w, observe)?,
        _ => None,
    };
    let (mut y, cache) = layer.forward_train(x, weight.as_ref())?;
    let mask = match (quant.as_mut(), &*layer) {
        (Some(q), Layer::Relu) => q.activation(&act_site(prefix, i), &mut y, observe)?,
        _ => None,
    };
    Ok((y, LayerTape { cache, weight, mask }))
}

fn eval_step(layer: &Layer, prefix: &str, i: usize, quant: Option<&QuantState>, x: &Tensor) -> Result<Tensor> {
    let weight = match (quant, layer.weight()) {
        (Some(q), Some(w)) => q.apply_weight(&weight_site(prefix, i), w)?,
        _ => None,
    };
    let mut y = layer.infer(x, weight.as_ref())?;
    if let (Some(q), Layer::Relu) = (quant, layer) {
        q.apply_activation(&act_site(prefix, i), &mut y)?;
    }
    Ok(y)
}

fn back_step(layer: &Layer, tape: &LayerTape, mut dy: Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    if let Some(mask) = &tape.mask {
        for (g, &pass) in dy.data_mut().iter_mut().zip(mask) {
            if !pass {
                *g = 0.0;
            }
        }
    }
    layer.backward(&tape.cache, &dy, tape.weight.as_ref())
}

fn check_batch(spec: &NetworkSpec, x: &Tensor) -> Result<()> {
    if x.shape().len() < 2 || x.shape()[1..] != spec.input_shape[..] {
        return Err(Error::shape(
            format!("{} input", spec.name),
            format!("(B, {:?})", spec.input_shape),
            format!("{:?}", x.shape()),
        ));
    }
    Ok(())
}

impl BranchyNetwork {
    pub fn new(spec: NetworkSpec) -> Self {
        BranchyNetwork { spec, quant: None }
    }

    pub fn exit_count(&self) -> usize {
        self.spec.exit_count()
    }

    /// Quantization is active when a state is attached and enabled.
    pub fn is_quantized(&self) -> bool {
        self.quant.as_ref().is_some_and(|q| q.enabled)
    }

    pub fn forward_all(&self, x: &Tensor) -> Result<Activations> {
        check_batch(&self.spec, x)?;
        let quant = self.quant.as_ref();
        let mut backbone = Vec::with_capacity(self.spec.backbone.len());
        let mut cur = x.clone();
        for (i, layer) in self.spec.backbone.iter().enumerate() {
            cur = eval_step(layer, "backbone", i, quant, &cur)?;
            backbone.push(cur.clone());
        }
        let mut heads = Vec::with_capacity(self.spec.exits.len());
        for (e, exit) in self.spec.exits.iter().enumerate() {
            let prefix = head_prefix(e);
            let mut outs = Vec::with_capacity(exit.head.len());
            let mut cur = backbone[exit.after].clone();
            for (i, layer) in exit.head.iter().enumerate() {
                cur = eval_step(layer, &prefix, i, quant, &cur)?;
                outs.push(cur.clone());
            }
            heads.push(outs);
        }
        Ok(Activations { backbone, heads })
    }

    /// Logits `(B, classes)` at every decision point, final classifier last.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.forward_all(x)?.logits().into_iter().cloned().collect())
    }

    /// Training-mode forward. `observe` feeds quantization observers.
    pub(crate) fn forward_train(&mut self, x: &Tensor, observe: bool) -> Result<(Vec<Tensor>, Tape)> {
        check_batch(&self.spec, x)?;
        let BranchyNetwork { spec, quant } = self;
        let mut tape = Tape {
            backbone: Vec::with_capacity(spec.backbone.len()),
            heads: Vec::with_capacity(spec.exits.len()),
        };
        let mut taps = vec![None; spec.exits.len()];
        let mut cur = x.clone();
        for (i, layer) in spec.backbone.iter_mut().enumerate() {
            let (y, t) = train_step(layer, "backbone", i, quant, &cur, observe)?;
            tape.backbone.push(t);
            for (e, exit) in spec.exits.iter().enumerate() {
                if exit.after == i {
                    taps[e] = Some(y.clone());
                }
            }
            cur = y;
        }
        let mut logits = Vec::with_capacity(spec.exits.len() + 1);
        for (e, exit) in spec.exits.iter_mut().enumerate() {
            let prefix = head_prefix(e);
            let mut h = taps[e].take().expect("exit attaches inside the backbone");
            let mut tapes = Vec::with_capacity(exit.head.len());
            for (i, layer) in exit.head.iter_mut().enumerate() {
                let (y, t) = train_step(layer, &prefix, i, quant, &h, observe)?;
                tapes.push(t);
                h = y;
            }
            tape.heads.push(tapes);
            logits.push(h);
        }
        logits.push(cur);
        Ok((logits, tape))
    }

    /// Joint loss of one batch and its parameter gradients, with training-mode
    /// batch-norm. Running statistics are updated as in a training step.
    pub fn loss_and_grads(&mut self, x: &Tensor, targets: Targets<'_>, weights: &[f64]) -> Result<(f64, Grads)> {
        let (logits, tape) = self.forward_train(x, false)?;
        let (loss, dlogits) = joint_loss(&logits, targets, weights)?;
        Ok((loss, self.backward(&tape, dlogits)?))
    }

    /// Backpropagates per-exit logit gradients through heads and backbone.
    pub(crate) fn backward(&self, tape: &Tape, dlogits: Vec<Tensor>) -> Result<Grads> {
        let spec = &self.spec;
        let n_exits = spec.exits.len();
        let mut dlogits = dlogits.into_iter();
        let mut head_grads = Vec::with_capacity(n_exits);
        let mut head_dx: Vec<Option<Tensor>> = Vec::with_capacity(n_exits);
        for (e, exit) in spec.exits.iter().enumerate() {
            let mut dy = dlogits.next().expect("one gradient per exit");
            let mut grads = vec![Vec::new(); exit.head.len()];
            for (i, layer) in exit.head.iter().enumerate().rev() {
                let (dx, g) = back_step(layer, &tape.heads[e][i], dy)?;
                grads[i] = g;
                dy = dx;
            }
            head_grads.push(grads);
            head_dx.push(Some(dy));
        }
        let mut dy = dlogits.next().expect("final classifier gradient");
        let mut grads = vec![Vec::new(); spec.backbone.len()];
        for (i, layer) in spec.backbone.iter().enumerate().rev() {
            for (e, exit) in spec.exits.iter().enumerate() {
                if exit.after == i {
                    let extra = head_dx[e].take().expect("head gradient used once");
                    for (a, b) in dy.data_mut().iter_mut().zip(extra.data()) {
                        *a += b;
                    }
                }
            }
            let (dx, g) = back_step(layer, &tape.backbone[i], dy)?;
            grads[i] = g;
            dy = dx;
        }
        grads.extend(head_grads.into_iter().flatten());
        Ok(grads)
    }
}

/// Summed per-exit weighted cross entropy, averaged over the batch, and its
/// gradient with respect to each exit's logits.
pub fn joint_loss(logits: &[Tensor], targets: Targets<'_>, weights: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    if logits.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} exit loss weights for {} exits",
            weights.len(),
            logits.len()
        )));
    }
    let n = targets.labels.len();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &w) in logits.iter().zip(weights) {
        let classes = z.shape()[1];
        if z.shape()[0] != n {
            return Err(Error::shape("loss", n, z.shape()[0]));
        }
        let mut g = Tensor::zeros(z.shape());
        for (s, (row, grow)) in z.data().chunks(classes).zip(g.data_mut().chunks_mut(classes)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            let y = targets.labels[s];
            let mut loss = targets.lambda * (log_sum - row[y]);
            for (k, gv) in grow.iter_mut().enumerate() {
                *gv = (row[k] - log_sum).exp();
            }
            grow[y] -= targets.lambda;
            if let Some(other) = targets.mixed_with {
                let y2 = other[s];
                loss += (1.0 - targets.lambda) * (log_sum - row[y2]);
                grow[y2] -= 1.0 - targets.lambda;
            }
            total += w * loss / n as f64;
            grow.iter_mut().for_each(|gv| *gv *= w / n as f64);
        }
        grads.push(g);
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_loss_uniform_logits() {
        let z = Tensor::zeros(&[2, 10]);
        let (loss, g) = joint_loss(&[z.clone(), z], Targets::hard(&[0, 3]), &[1.0, 0.5]).unwrap();
        assert!((loss - 1.5 * 10f64.ln()).abs() < 1e-12);
        assert!((g[0].data()[0] - (0.1 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g[1].data()[1] - 0.1 * 0.5 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_mixed_targets() {
        let z = Tensor::zeros(&[1, 2]);
        let t = Targets {
            labels: &[0],
            mixed_with: Some(&[1]),
            lambda: 0.5,
        };
        let (_, g) = joint_loss(&[z], t, &[1.0]).unwrap();
        assert!(g[0].data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn weight_count_mismatch() {
        let z = Tensor::zeros(&[1, 2]);
        assert!(joint_loss(&[z], Targets::hard(&[0]), &[1.0, 1.0]).is_err());
    }
}

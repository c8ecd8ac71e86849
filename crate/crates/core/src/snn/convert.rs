use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sim::{SnnBranch, SnnLayer, SpikingNetwork};
use super::LifConfig;
use crate::ann::network::BranchyNetwork;
use crate::error::{Error, Result};
use crate::layer::{Conv2d, Layer, Linear};
use crate::quant::{compute_qparams, fake_quant, head_prefix, weight_site, MinMaxObserver, QParams, QuantMode};
use crate::tensor::Tensor;

pub const CONVERSION_PERCENTILE: f64 = 99.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    pub lif: LifConfig,
    /// Percentile of positive calibration activations used as each layer's scale.
    pub percentile: f64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        ConversionConfig {
            lif: LifConfig::default(),
            percentile: CONVERSION_PERCENTILE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub layer: String,
    pub lambda: f64,
}

/// Nearest-rank percentile of the strictly positive values; `None` if there are none.
pub fn percentile_positive(values: &[f64], p: f64) -> Option<f64> {
    let mut pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    if pos.is_empty() {
        return None;
    }
    // guard against p/100·n landing a hair above an integer
    let rank = ((p / 100.0) * pos.len() as f64 - 1e-9).ceil().max(1.0) as usize - 1;
    let rank = rank.min(pos.len() - 1);
    let (_, v, _) = pos.select_nth_unstable_by(rank, f64::total_cmp);
    Some(*v)
}

struct Converter<'a> {
    net: &'a BranchyNetwork,
    cfg: &'a ConversionConfig,
    scales: Vec<ScaleRecord>,
    qparams: BTreeMap<String, QParams>,
}

impl Converter<'_> {
    /// Converts one chain of layers whose input has scale `lambda_in`.
    /// Returns the converted layers and the scale after each of them.
    fn chain(&mut self, prefix: &str, layers: &[Layer], acts: &[Tensor], mut lambda_in: f64) -> Result<(Vec<SnnLayer>, Vec<f64>)> {
        let theta = self.cfg.lif.theta;
        let mut out = Vec::with_capacity(layers.len());
        let mut lambdas = Vec::with_capacity(layers.len());
        let mut pending_bn: Option<(Vec<f64>, Vec<f64>, Vec<bool>)> = None;
        for (i, layer) in layers.iter().enumerate() {
            let label = format!("{prefix}.{i} ({})", layer.label());
            let converted = match layer {
                Layer::Flatten => SnnLayer::Flatten,
                Layer::Relu => SnnLayer::Lif,
                Layer::MaxPool2d(p) => SnnLayer::MaxPoolOr(*p),
                Layer::AvgPool2d(p) => SnnLayer::AvgPool(*p),
                Layer::GlobalAvgPool => SnnLayer::GlobalAvgPool,
                Layer::BatchNorm(bn) => {
                    if !matches!(layers.get(i + 1), Some(Layer::Linear(_))) {
                        return Err(Error::Conversion {
                            layer: label,
                            reason: "batch-norm can only be folded into a directly following linear layer".into(),
                        });
                    }
                    let (scale, shift) = bn.affine();
                    pending_bn = Some((scale, shift, silent_features(&acts[i], bn.features)));
                    SnnLayer::Identity
                }
                Layer::Linear(_) | Layer::Conv2d(_) => {
                    let readout = !matches!(layers.get(i + 1), Some(Layer::Relu));
                    let site = weight_site(prefix, i);
                    let (mut w, mut b) = self.source_params(layer, &site)?;
                    if let Some((scale, shift, silent)) = pending_bn.take() {
                        fold_batchnorm(&mut w, &mut b, &scale, &shift, &label)?;
                        zero_columns(&mut w, &silent);
                    }
                    let (w_gain, b_gain) = if readout {
                        (lambda_in, 1.0)
                    } else {
                        // acts[i + 2] is the output of the ReLU following this layer
                        let lambda_out = percentile_positive(acts[i + 2].data(), self.cfg.percentile).ok_or_else(|| {
                            Error::Conversion {
                                layer: label.clone(),
                                reason: "no positive activations in the calibration set".into(),
                            }
                        })?;
                        self.scales.push(ScaleRecord {
                            layer: label.clone(),
                            lambda: lambda_out,
                        });
                        let lambda_prev = lambda_in;
                        lambda_in = lambda_out;
                        (theta * lambda_prev / lambda_out, theta / lambda_out)
                    };
                    w.data_mut().iter_mut().for_each(|v| *v *= w_gain);
                    b.data_mut().iter_mut().for_each(|v| *v *= b_gain);
                    if self.net.is_quantized() {
                        let mut obs = MinMaxObserver::default();
                        obs.observe(w.data()).map_err(|_| Error::Observation { site: site.clone() })?;
                        let qp = compute_qparams(&obs, QuantMode::Symmetric)?;
                        w = fake_quant(&w, &qp);
                        self.qparams.insert(site, qp);
                    }
                    SnnLayer::Synapse {
                        layer: rebuild(layer, w, b)?,
                        readout,
                    }
                }
            };
            out.push(converted);
            lambdas.push(lambda_in);
        }
        Ok((out, lambdas))
    }

    /// Weights as the ANN used them (fake-quantized for a QAT network).
    fn source_params(&self, layer: &Layer, site: &str) -> Result<(Tensor, Tensor)> {
        let (w, b) = match layer {
            Layer::Linear(l) => (&l.weight, &l.bias),
            Layer::Conv2d(c) => (&c.weight, &c.bias),
            _ => unreachable!("synaptic layers only"),
        };
        let w = match &self.net.quant {
            Some(q) => q.apply_weight(site, w)?.unwrap_or_else(|| w.clone()),
            None => w.clone(),
        };
        Ok((w, b.clone()))
    }
}

fn fold_batchnorm(w: &mut Tensor, b: &mut Tensor, scale: &[f64], shift: &[f64], label: &str) -> Result<()> {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    if in_f != scale.len() {
        return Err(Error::Conversion {
            layer: label.into(),
            reason: format!("batch-norm has {} features, linear expects {in_f}", scale.len()),
        });
    }
    for o in 0..out_f {
        let row = &mut w.data_mut()[o * in_f..(o + 1) * in_f];
        let extra: f64 = row.iter().zip(shift).map(|(wv, s)| wv * s).sum();
        row.iter_mut().zip(scale).for_each(|(wv, s)| *wv *= s);
        b.data_mut()[o] += extra;
    }
    Ok(())
}

/// Features that are never positive on the calibration set.
fn silent_features(input: &Tensor, features: usize) -> Vec<bool> {
    let mut silent = vec![true; features];
    for row in input.data().chunks(features) {
        silent.iter_mut().zip(row).for_each(|(s, &v)| *s &= v <= 0.0);
    }
    silent
}

/// Drops inputs that carry no signal; their contribution already sits in the bias.
fn zero_columns(w: &mut Tensor, silent: &[bool]) {
    let in_f = w.shape()[1];
    for row in w.data_mut().chunks_mut(in_f) {
        row.iter_mut().zip(silent).filter(|(_, &s)| s).for_each(|(v, _)| *v = 0.0);
    }
}

fn rebuild(layer: &Layer, weight: Tensor, bias: Tensor) -> Result<Layer> {
    Ok(match layer {
        Layer::Linear(_) => Layer::Linear(Linear::from_parts(weight, bias)?),
        Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
            weight,
            bias,
            ..c.clone()
        }),
        other => other.clone(),
    })
}

/// Data-based weight normalization: every spiking layer's weights are scaled by
/// `theta·lambda_prev/lambda_l` and its bias by `theta/lambda_l`, where
/// `lambda_l` is a high percentile of the layer's positive ANN activations on
/// `calibration`. Readouts keep graded outputs (`W·lambda_prev`, bias unchanged)
/// and batch-norm is folded into the following linear layer.
pub fn convert_ann_to_snn(net: &BranchyNetwork, calibration: &Tensor, cfg: &ConversionConfig) -> Result<SpikingNetwork> {
    cfg.lif.validate()?;
    if !(cfg.percentile > 0.0 && cfg.percentile <= 100.0) {
        return Err(Error::Config(format!("percentile must lie in (0, 100], got {}", cfg.percentile)));
    }
    if calibration.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Usage("calibration set is empty".into()));
    }
    let acts = net.forward_all(calibration)?;
    let mut conv = Converter {
        net,
        cfg,
        scales: Vec::new(),
        qparams: BTreeMap::new(),
    };
    let (backbone, lambdas) = conv.chain("backbone", &net.spec.backbone, &prepend(calibration, &acts.backbone), 1.0)?;
    let mut exits = Vec::with_capacity(net.spec.exits.len());
    for (e, exit) in net.spec.exits.iter().enumerate() {
        let head_acts = prepend(&acts.backbone[exit.after], &acts.heads[e]);
        let (head, _) = conv.chain(&head_prefix(e), &exit.head, &head_acts, lambdas[exit.after])?;
        exits.push(SnnBranch { after: exit.after, head });
    }
    Ok(SpikingNetwork {
        name: net.spec.name.clone(),
        input_shape: net.spec.input_shape.clone(),
        classes: net.spec.classes,
        lif: cfg.lif,
        backbone,
        exits,
        scales: conv.scales,
        quantized: net.is_quantized(),
        weight_qparams: conv.qparams,
        topology: net.spec.topology(),
    })
}

/// `[input, outputs...]` so that `acts[i + 1]` is the output of layer `i`.
fn prepend(input: &Tensor, outputs: &[Tensor]) -> Vec<Tensor> {
    std::iter::once(input.clone()).chain(outputs.iter().cloned()).collect()
}

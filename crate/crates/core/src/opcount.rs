//! Static MAC profiles and per-run operation tallies.

use serde::{Deserialize, Serialize};

use crate::ann::arch::Topology;
use crate::error::{Error, Result};
use crate::layer::LayerKind;

/// `K_h·K_w·C_in·C_out·H_out·W_out` for a convolution applied to `input_shape`.
pub fn mac_count_conv(layer: &LayerKind, input_shape: &[usize]) -> Result<u64> {
    let LayerKind::Conv2d {
        in_channels,
        out_channels,
        kernel_h,
        kernel_w,
        ..
    } = *layer
    else {
        return Err(Error::Usage(format!("mac_count_conv called on {}", layer.label())));
    };
    let out = layer.output_shape(input_shape)?;
    Ok((kernel_h * kernel_w * in_channels * out_channels * out[1] * out[2]) as u64)
}

/// `B·F_in·F_out` for a fully-connected layer.
pub fn mac_count_linear(layer: &LayerKind, batch: u64) -> Result<u64> {
    let LayerKind::Linear {
        in_features,
        out_features,
    } = *layer
    else {
        return Err(Error::Usage(format!("mac_count_linear called on {}", layer.label())));
    };
    if batch == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    Ok(batch * (in_features * out_features) as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub label: String,
    pub macs: u64,
    /// Output units of a synaptic layer (its neurons once converted); zero otherwise.
    pub neurons: u64,
    pub weights: u64,
    pub inputs: u64,
    pub outputs: u64,
}

/// Exact per-inference static counts for a branchy network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticProfile {
    pub name: String,
    pub backbone: Vec<LayerProfile>,
    pub heads: Vec<Vec<LayerProfile>>,
    /// Backbone layer each early exit hangs off.
    pub exit_after: Vec<usize>,
    pub backbone_macs: u64,
    pub head_macs: Vec<u64>,
    pub backbone_neurons: u64,
    pub total_neurons: u64,
    /// MACs spent by a sample that leaves at each decision point (early exits, then
    /// final), counting every head visited on the way.
    pub cumulative_macs: Vec<u64>,
    pub cumulative_neurons: Vec<u64>,
}

fn layer_profile(kind: &LayerKind, input: &[usize], output: &[usize]) -> Result<LayerProfile> {
    let macs = match kind {
        LayerKind::Conv2d { .. } => mac_count_conv(kind, input)?,
        LayerKind::Linear { .. } => mac_count_linear(kind, 1)?,
        _ => 0,
    };
    let (neurons, weights) = match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => (output.iter().product::<usize>(), in_channels * out_channels * kernel_h * kernel_w),
        LayerKind::Linear {
            in_features,
            out_features,
        } => (out_features, in_features * out_features),
        _ => (0, 0),
    };
    Ok(LayerProfile {
        label: kind.label(),
        macs,
        neurons: neurons as u64,
        weights: weights as u64,
        inputs: input.iter().product::<usize>() as u64,
        outputs: output.iter().product::<usize>() as u64,
    })
}

/// Static per-inference profile (batch size 1).
pub fn profile_network(topo: &Topology) -> Result<StaticProfile> {
    let shapes = topo.validate()?;
    let backbone = topo
        .backbone
        .iter()
        .enumerate()
        .map(|(i, k)| layer_profile(k, shapes.backbone_input(&topo.input_shape, i), &shapes.backbone[i]))
        .collect::<Result<Vec<_>>>()?;
    let heads = topo
        .exits
        .iter()
        .enumerate()
        .map(|(e, exit)| {
            exit.head
                .iter()
                .enumerate()
                .map(|(i, k)| layer_profile(k, shapes.head_input(topo, e, i), &shapes.heads[e][i]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let sum = |ls: &[LayerProfile], f: fn(&LayerProfile) -> u64| ls.iter().map(f).sum::<u64>();
    let backbone_macs = sum(&backbone, |l| l.macs);
    let backbone_neurons = sum(&backbone, |l| l.neurons);
    let head_macs: Vec<u64> = heads.iter().map(|h| sum(h, |l| l.macs)).collect();
    let head_neurons: Vec<u64> = heads.iter().map(|h| sum(h, |l| l.neurons)).collect();

    let mut cumulative_macs = Vec::with_capacity(topo.exit_count());
    let mut cumulative_neurons = Vec::with_capacity(topo.exit_count());
    let (mut heads_macs, mut heads_neurons) = (0, 0);
    for (e, exit) in topo.exits.iter().enumerate() {
        heads_macs += head_macs[e];
        heads_neurons += head_neurons[e];
        cumulative_macs.push(sum(&backbone[..=exit.after], |l| l.macs) + heads_macs);
        cumulative_neurons.push(sum(&backbone[..=exit.after], |l| l.neurons) + heads_neurons);
    }
    cumulative_macs.push(backbone_macs + heads_macs);
    cumulative_neurons.push(backbone_neurons + heads_neurons);

    Ok(StaticProfile {
        name: topo.name.clone(),
        exit_after: topo.exits.iter().map(|e| e.after).collect(),
        total_neurons: backbone_neurons + heads_neurons,
        backbone,
        heads,
        backbone_macs,
        head_macs,
        backbone_neurons,
        cumulative_macs,
        cumulative_neurons,
    })
}

impl StaticProfile {
    pub fn exit_count(&self) -> usize {
        self.cumulative_macs.len()
    }

    /// Layers executed by a sample leaving at `exit`: backbone prefix plus visited heads.
    pub fn visited_layers(&self, exit: usize) -> impl Iterator<Item = &LayerProfile> {
        let n_early = self.exit_after.len();
        let (backbone_end, heads_end) = if exit < n_early {
            (self.exit_after[exit] + 1, exit + 1)
        } else {
            (self.backbone.len(), n_early)
        };
        self.backbone[..backbone_end]
            .iter()
            .chain(self.heads[..heads_end].iter().flatten())
    }
}

/// Operation and traffic tallies for one inference (or a sum over many).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub n_mac: u64,
    /// Spike events, Σ_t Σ_l S[l][t].
    pub n_ac: u64,
    /// Spike events weighted by fan-out.
    pub n_ac_synaptic: u64,
    /// Decay + threshold operations, `2·neurons·T`.
    pub n_lif: u64,
    pub n_neurons: u64,
    pub timesteps: u64,
    pub mem_bytes: u64,
}

impl std::ops::AddAssign for OpCounts {
    /// Sums counts; `timesteps` is kept, not summed.
    fn add_assign(&mut self, rhs: Self) {
        self.n_mac += rhs.n_mac;
        self.n_ac += rhs.n_ac;
        self.n_ac_synaptic += rhs.n_ac_synaptic;
        self.n_lif += rhs.n_lif;
        self.n_neurons += rhs.n_neurons;
        self.timesteps = self.timesteps.max(rhs.timesteps);
        self.mem_bytes += rhs.mem_bytes;
    }
}

/// Per-sample means of summed counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanOpCounts {
    pub samples: u64,
    pub n_mac: f64,
    pub n_ac: f64,
    pub n_ac_synaptic: f64,
    pub n_lif: f64,
    pub n_neurons: f64,
    pub timesteps: u64,
    pub mem_bytes: f64,
}

impl MeanOpCounts {
    pub fn from_total(total: &OpCounts, samples: u64) -> Self {
        let d = samples.max(1) as f64;
        MeanOpCounts {
            samples,
            n_mac: total.n_mac as f64 / d,
            n_ac: total.n_ac as f64 / d,
            n_ac_synaptic: total.n_ac_synaptic as f64 / d,
            n_lif: total.n_lif as f64 / d,
            n_neurons: total.n_neurons as f64 / d,
            timesteps: total.timesteps,
            mem_bytes: total.mem_bytes as f64 / d,
        }
    }
}

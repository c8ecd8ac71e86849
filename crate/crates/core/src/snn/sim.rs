use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{lif_step_in_place, LifConfig, SpikeTrain};
use crate::ann::arch::Topology;
use crate::error::{Error, Result};
use crate::layer::{Layer, Pool2d};
use crate::opcount::{profile_network, LayerProfile, StaticProfile};
use crate::quant::QParams;
use crate::tensor::Tensor;

/// A layer of the converted network. Indices match the source ANN one-to-one:
/// ReLUs become `Lif` populations and folded batch-norms become `Identity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnnLayer {
    Flatten,
    /// Linear or conv synapses. A readout integrates currents without spiking.
    Synapse { layer: Layer, readout: bool },
    Lif,
    /// OR over each window of binary spikes.
    MaxPoolOr(Pool2d),
    AvgPool(Pool2d),
    GlobalAvgPool,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnBranch {
    pub after: usize,
    pub head: Vec<SnnLayer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikingNetwork {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub lif: LifConfig,
    pub backbone: Vec<SnnLayer>,
    pub exits: Vec<SnnBranch>,
    /// Normalization scale of every spiking population.
    pub scales: Vec<super::ScaleRecord>,
    pub quantized: bool,
    /// Symmetric 8-bit parameters of each re-quantized synaptic weight.
    pub weight_qparams: BTreeMap<String, QParams>,
    /// Shape graph of the source ANN, used for operation counting.
    pub topology: Topology,
}

/// Spike count per timestep of one LIF population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpikes {
    pub label: String,
    pub neurons: u64,
    pub counts: Vec<u64>,
}

impl LayerSpikes {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Events arriving at one executed synaptic layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynapticEvents {
    pub label: String,
    pub events: u64,
    pub macs: u64,
    pub inputs: u64,
}

impl SynapticEvents {
    /// Events times the layer's mean fan-out.
    pub fn ops(&self) -> u64 {
        if self.inputs == 0 {
            return 0;
        }
        (self.events as u128 * self.macs as u128 / self.inputs as u128) as u64
    }
}

/// Spike activity of one simulated sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpikeStats {
    pub sample_id: u64,
    pub timesteps: usize,
    /// Input spikes per timestep.
    pub input: Vec<u64>,
    /// `S[l][t]` for every simulated LIF population.
    pub lif: Vec<LayerSpikes>,
    pub synaptic: Vec<SynapticEvents>,
}

/// Spike events of LIF populations, `Σ_t Σ_l S[l][t]`; input spikes excluded.
pub fn ac_count(stats: &SpikeStats) -> u64 {
    stats.lif.iter().map(LayerSpikes::total).sum()
}

/// Spike events times fan-out, summed over executed synaptic layers (input spikes included).
pub fn ac_count_synaptic(stats: &SpikeStats) -> u64 {
    stats.synaptic.iter().map(SynapticEvents::ops).sum()
}

/// LIF decay and threshold operations of a sample leaving at `exit`: `2·N·T`.
pub fn lif_op_count(profile: &StaticProfile, timesteps: u64, exit: usize) -> Result<u64> {
    let neurons = profile
        .cumulative_neurons
        .get(exit)
        .ok_or_else(|| Error::Usage(format!("exit {exit} beyond {} decision points", profile.exit_count())))?;
    Ok(neurons * timesteps * 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitDecision {
    Exit,
    Continue,
}

/// Outcome of simulating one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRun {
    pub exit: usize,
    /// Accumulated readout of every visited exit.
    pub logits: Vec<Vec<f64>>,
    pub stats: SpikeStats,
}

impl SampleRun {
    /// Readout of `exit` averaged over the time window.
    pub fn mean_logits(&self, exit: usize) -> Vec<f64> {
        let t = self.stats.timesteps.max(1) as f64;
        self.logits[exit].iter().map(|v| v / t).collect()
    }
}

struct Group {
    ids: Vec<usize>,
    /// `(n·T, sample dims...)`, rows ordered sample-major.
    x: Tensor,
    events: Vec<u64>,
}

impl Group {
    fn rows_per_sample(&self, t: usize) -> usize {
        self.x.len() / (self.ids.len() * t).max(1)
    }

    fn keep(&self, keep: &[bool], t: usize) -> Group {
        let d = self.rows_per_sample(t) * t;
        let mut data = Vec::new();
        let mut ids = Vec::new();
        let mut events = Vec::new();
        for (k, &alive) in keep.iter().enumerate() {
            if alive {
                data.extend_from_slice(&self.x.data()[k * d..(k + 1) * d]);
                ids.push(self.ids[k]);
                events.push(self.events[k]);
            }
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = ids.len() * t;
        Group {
            ids,
            x: Tensor::new(shape, data).expect("group shape"),
            events,
        }
    }
}

enum Step {
    Spikes,
    Logits(Vec<Vec<f64>>),
}

impl SpikingNetwork {
    pub fn exit_count(&self) -> usize {
        self.exits.len() + 1
    }

    pub fn timesteps(&self) -> usize {
        self.lif.timesteps
    }

    pub fn profile(&self) -> Result<StaticProfile> {
        profile_network(&self.topology)
    }

    fn run_layer(
        &self,
        layer: &SnnLayer,
        label: &str,
        prof: &LayerProfile,
        group: &mut Group,
        runs: &mut [SampleRun],
    ) -> Result<Step> {
        let t = self.lif.timesteps;
        match layer {
            SnnLayer::Identity => {}
            SnnLayer::Flatten => {
                let rows = group.x.shape()[0];
                let d = group.x.len() / rows.max(1);
                group.x = std::mem::replace(&mut group.x, Tensor::zeros(&[1])).reshape(&[rows, d])?;
            }
            SnnLayer::Synapse { layer, readout } => {
                for (k, &id) in group.ids.iter().enumerate() {
                    runs[id].stats.synaptic.push(SynapticEvents {
                        label: label.to_string(),
                        events: group.events[k],
                        macs: prof.macs,
                        inputs: prof.inputs,
                    });
                }
                let currents = layer.infer(&group.x, None)?;
                if *readout {
                    let width = currents.len() / (group.ids.len() * t).max(1);
                    let logits = currents
                        .data()
                        .chunks(width * t)
                        .map(|rows| {
                            let mut acc = vec![0.0; width];
                            for row in rows.chunks(width) {
                                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                            }
                            acc
                        })
                        .collect();
                    return Ok(Step::Logits(logits));
                }
                group.x = currents;
            }
            SnnLayer::Lif => {
                let n = group.rows_per_sample(t);
                let u0 = self.lif.initial_membrane();
                let mut u = vec![u0; n];
                let mut spikes = vec![0.0f64; n];
                let data = group.x.data_mut();
                for (k, &id) in group.ids.iter().enumerate() {
                    u.iter_mut().for_each(|v| *v = u0);
                    let mut counts = Vec::with_capacity(t);
                    for step in 0..t {
                        let row = &mut data[(k * t + step) * n..(k * t + step + 1) * n];
                        lif_step_in_place(&self.lif, &mut u, row, &mut spikes);
                        row.copy_from_slice(&spikes);
                        counts.push(spikes.iter().filter(|&&s| s > 0.0).count() as u64);
                    }
                    group.events[k] = counts.iter().sum();
                    runs[id].stats.lif.push(LayerSpikes {
                        label: label.to_string(),
                        neurons: n as u64,
                        counts,
                    });
                }
            }
            SnnLayer::MaxPoolOr(p) => {
                group.x = Layer::MaxPool2d(*p).infer(&group.x, None)?;
                let d = group.x.len() / group.ids.len().max(1);
                for (k, chunk) in group.x.data().chunks(d.max(1)).enumerate() {
                    group.events[k] = chunk.iter().filter(|&&s| s > 0.0).count() as u64;
                }
            }
            SnnLayer::AvgPool(p) => group.x = Layer::AvgPool2d(*p).infer(&group.x, None)?,
            SnnLayer::GlobalAvgPool => group.x = Layer::GlobalAvgPool.infer(&group.x, None)?,
        }
        Ok(Step::Spikes)
    }

    fn run_head(
        &self,
        e: usize,
        mut group: Group,
        profile: &StaticProfile,
        runs: &mut [SampleRun],
    ) -> Result<Vec<Vec<f64>>> {
        for (i, layer) in self.exits[e].head.iter().enumerate() {
            let label = format!("exit{e}.{i}");
            if let Step::Logits(l) = self.run_layer(layer, &label, &profile.heads[e][i], &mut group, runs)? {
                return Ok(l);
            }
        }
        Err(Error::Config(format!("exit {e} head has no readout layer")))
    }

    /// Layer-sequential simulation of a batch of encoded samples. At every
    /// early exit `decide(sample, exit, accumulated_logits)` chooses whether
    /// the sample leaves; deeper layers are never simulated for it.
    pub fn simulate(
        &self,
        trains: &[SpikeTrain],
        mut decide: impl FnMut(usize, usize, &[f64]) -> ExitDecision,
    ) -> Result<Vec<SampleRun>> {
        let t = self.lif.timesteps;
        let profile = self.profile()?;
        let per_sample: usize = self.input_shape.iter().product();
        let mut data = Vec::with_capacity(trains.len() * t * per_sample);
        let mut runs = Vec::with_capacity(trains.len());
        let mut events = Vec::with_capacity(trains.len());
        for train in trains {
            if train.timesteps != t || train.shape != self.input_shape {
                return Err(Error::shape(
                    format!("{} input", self.name),
                    format!("T={t}, {:?}", self.input_shape),
                    format!("T={}, {:?}", train.timesteps, train.shape),
                ));
            }
            data.extend(train.data.iter().map(|&s| s as f64));
            let input: Vec<u64> = (0..t).map(|s| train.at(s).iter().map(|&v| v as u64).sum()).collect();
            events.push(input.iter().sum());
            runs.push(SampleRun {
                exit: self.exits.len(),
                logits: Vec::new(),
                stats: SpikeStats {
                    sample_id: train.sample_id,
                    timesteps: t,
                    input,
                    ..SpikeStats::default()
                },
            });
        }
        if trains.is_empty() {
            return Ok(runs);
        }
        let mut shape = vec![trains.len() * t];
        shape.extend(&self.input_shape);
        let mut group = Group {
            ids: (0..trains.len()).collect(),
            x: Tensor::new(shape, data)?,
            events,
        };

        for (i, layer) in self.backbone.iter().enumerate() {
            let label = format!("backbone.{i}");
            if let Step::Logits(logits) = self.run_layer(layer, &label, &profile.backbone[i], &mut group, &mut runs)? {
                for (k, l) in group.ids.iter().zip(logits) {
                    runs[*k].logits.push(l);
                }
                return Ok(runs);
            }
            for e in (0..self.exits.len()).filter(|&e| self.exits[e].after == i) {
                let branch = Group {
                    ids: group.ids.clone(),
                    x: group.x.clone(),
                    events: group.events.clone(),
                };
                let logits = self.run_head(e, branch, &profile, &mut runs)?;
                let mut keep = Vec::with_capacity(group.ids.len());
                for (&id, l) in group.ids.iter().zip(logits) {
                    let leave = decide(id, e, &l) == ExitDecision::Exit;
                    runs[id].logits.push(l);
                    if leave {
                        runs[id].exit = e;
                    }
                    keep.push(!leave);
                }
                if keep.iter().all(|&k| !k) {
                    return Ok(runs);
                }
                if keep.iter().any(|&k| !k) {
                    group = group.keep(&keep, t);
                }
            }
        }
        Err(Error::Config(format!("{}: backbone has no readout layer", self.name)))
    }
}

/// Full-depth simulation of one sample: accumulated logits at every exit and its spike statistics.
pub fn snn_forward(snet: &SpikingNetwork, train: &SpikeTrain) -> Result<(Vec<Vec<f64>>, SpikeStats)> {
    let run = snet
        .simulate(std::slice::from_ref(train), |_, _, _| ExitDecision::Continue)?
        .pop()
        .expect("one run per train");
    Ok((run.logits, run.stats))
}

/// Per-layer, per-timestep spike counts summed over many runs, in first-seen layer order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpikeTotals {
    pub layers: Vec<(String, Vec<u64>)>,
}

impl SpikeTotals {
    fn add_layer(&mut self, label: &str, counts: &[u64]) {
        let pos = match self.layers.iter().position(|(l, _)| l == label) {
            Some(p) => p,
            None => {
                self.layers.push((label.to_string(), vec![0; counts.len()]));
                self.layers.len() - 1
            }
        };
        let acc = &mut self.layers[pos].1;
        if acc.len() < counts.len() {
            acc.resize(counts.len(), 0);
        }
        acc.iter_mut().zip(counts).for_each(|(a, c)| *a += c);
    }

    pub fn add(&mut self, stats: &SpikeStats) {
        self.add_layer("input", &stats.input);
        for l in &stats.lif {
            self.add_layer(&l.label, &l.counts);
        }
    }

    /// Writes `(layer, timestep, spike_count)` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(["layer", "timestep", "spike_count"])?;
        for (label, counts) in &self.layers {
            for (t, c) in counts.iter().enumerate() {
                w.write_record([label.as_str(), &t.to_string(), &c.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Writes `(layer, timestep, spike_count)` rows summed over all given runs.
pub fn write_spike_stats_csv<'a>(path: &Path, stats: impl IntoIterator<Item = &'a SpikeStats>) -> Result<()> {
    let mut totals = SpikeTotals::default();
    stats.into_iter().for_each(|s| totals.add(s));
    totals.write_csv(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ac_counts() {
        assert_eq!(ac_count(&SpikeStats::default()), 0);
        let stats = SpikeStats {
            sample_id: 0,
            timesteps: 2,
            input: vec![5, 5],
            lif: vec![
                LayerSpikes {
                    label: "a".into(),
                    neurons: 4,
                    counts: vec![1, 2],
                },
                LayerSpikes {
                    label: "b".into(),
                    neurons: 4,
                    counts: vec![3, 4],
                },
            ],
            synaptic: vec![SynapticEvents {
                label: "fc".into(),
                events: 1,
                macs: 784 * 512,
                inputs: 784,
            }],
        };
        assert_eq!(ac_count(&stats), 10);
        assert_eq!(ac_count_synaptic(&stats), 512);
    }
}

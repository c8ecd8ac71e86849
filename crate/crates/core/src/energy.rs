//! Joule/watt conversion of operation counts using 45nm per-operation costs.

use serde::{Deserialize, Serialize};

use crate::ann::arch::Topology;
use crate::error::{Error, Result};
use crate::opcount::{profile_network, OpCounts, StaticProfile};

/// Per-operation energy costs in joules (memory: joules per byte).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConstants {
    /// 32-bit multiply-accumulate.
    pub e_mac: f64,
    /// 8-bit accumulate.
    pub e_ac: f64,
    /// 8-bit multiply (membrane decay).
    pub e_decay: f64,
    /// Threshold comparison.
    pub e_cmp: f64,
    pub e_mem: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            e_mac: 4.6e-12,
            e_ac: 0.03e-12,
            e_decay: 0.9e-12,
            e_cmp: 0.1e-12,
            e_mem: 80e-12,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.e_mac, self.e_ac, self.e_decay, self.e_cmp, self.e_mem];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("energy constants must be positive: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Ann,
    Snn,
}

/// Energy breakdown in joules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub kind: NetworkKind,
    /// Dense MAC energy (ANN only).
    pub e_mac: f64,
    /// Spike-triggered accumulate energy (SNN only).
    pub e_spike: f64,
    pub e_lif: f64,
    pub e_mem: f64,
    pub e_compute: f64,
    pub e_total: f64,
}

impl EnergyReport {
    pub fn scaled(&self, factor: f64) -> Self {
        EnergyReport {
            kind: self.kind,
            e_mac: self.e_mac * factor,
            e_spike: self.e_spike * factor,
            e_lif: self.e_lif * factor,
            e_mem: self.e_mem * factor,
            e_compute: self.e_compute * factor,
            e_total: self.e_total * factor,
        }
    }
}

/// `N_MAC·E_MAC + M_mem·E_mem`.
pub fn energy_ann(counts: &OpCounts, consts: &EnergyConstants) -> EnergyReport {
    let e_mac = counts.n_mac as f64 * consts.e_mac;
    let e_mem = counts.mem_bytes as f64 * consts.e_mem;
    EnergyReport {
        kind: NetworkKind::Ann,
        e_mac,
        e_spike: 0.0,
        e_lif: 0.0,
        e_mem,
        e_compute: e_mac,
        e_total: e_mac + e_mem,
    }
}

/// `E_spike + E_LIF + E_mem` with `E_spike = N_AC·E_AC` and
/// `E_LIF = N_neurons·T·(E_decay + E_cmp)`.
pub fn energy_snn(counts: &OpCounts, consts: &EnergyConstants) -> EnergyReport {
    let e_spike = counts.n_ac as f64 * consts.e_ac;
    let e_lif = counts.n_neurons as f64 * counts.timesteps as f64 * (consts.e_decay + consts.e_cmp);
    let e_mem = counts.mem_bytes as f64 * consts.e_mem;
    EnergyReport {
        kind: NetworkKind::Snn,
        e_mac: 0.0,
        e_spike,
        e_lif,
        e_mem,
        e_compute: e_spike + e_lif,
        e_total: e_spike + e_lif + e_mem,
    }
}

/// `P = E / t`.
pub fn power(energy_j: f64, time_s: f64) -> Result<f64> {
    if !(time_s > 0.0) {
        return Err(Error::Domain(format!("power needs a positive duration, got {time_s} s")));
    }
    Ok(energy_j / time_s)
}

/// Storage precision of a deployed variant, for memory-traffic counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryVariant {
    AnnFp32,
    AnnInt8,
    SnnFp32,
    SnnInt8,
}

impl MemoryVariant {
    fn weight_bytes(self) -> u64 {
        match self {
            MemoryVariant::AnnFp32 | MemoryVariant::SnnFp32 => 4,
            MemoryVariant::AnnInt8 | MemoryVariant::SnnInt8 => 1,
        }
    }

    fn activation_bytes(self, timesteps: u64) -> u64 {
        match self {
            MemoryVariant::AnnFp32 => 4,
            MemoryVariant::AnnInt8 => 1,
            // one byte per neuron per timestep
            MemoryVariant::SnnFp32 | MemoryVariant::SnnInt8 => timesteps,
        }
    }
}

/// Memory traffic of a sample leaving at `exit`: every visited weight read once,
/// plus the input and output activations of every visited synaptic layer.
/// Biases and batch-norm parameters are not counted.
pub fn memory_bytes_through(profile: &StaticProfile, variant: MemoryVariant, timesteps: u64, exit: usize) -> u64 {
    let act = variant.activation_bytes(timesteps);
    profile
        .visited_layers(exit)
        .filter(|l| l.weights > 0)
        .map(|l| l.weights * variant.weight_bytes() + (l.inputs + l.outputs) * act)
        .sum()
}

/// Full-depth memory traffic per inference.
pub fn memory_bytes(topo: &Topology, variant: MemoryVariant, timesteps: u64) -> Result<u64> {
    let profile = profile_network(topo)?;
    Ok(memory_bytes_through(&profile, variant, timesteps, profile.exit_count() - 1))
}

/// Published AlexNet/CIFAR-10 operation counts, used as golden inputs.
pub mod reference {
    use super::*;

    #[derive(Clone, Debug, Serialize)]
    pub struct ReferenceRow {
        pub model: &'static str,
        pub counts: OpCounts,
        pub kind: NetworkKind,
        /// Published compute energy in µJ.
        pub published_compute_uj: f64,
    }

    pub const ALEXNET_NEURONS: u64 = 180_234;

    /// Neurons implied by the published QDSNN LIF bound (7.37M ops at T=32).
    pub const QDSNN_BOUND_NEURONS: u64 = 115_156;

    fn snn(n_ac: u64, neurons: u64, timesteps: u64) -> OpCounts {
        OpCounts {
            n_ac,
            n_neurons: neurons,
            timesteps,
            n_lif: neurons * timesteps * 2,
            ..OpCounts::default()
        }
    }

    pub fn alexnet_rows() -> Vec<ReferenceRow> {
        vec![
            ReferenceRow {
                model: "ANN",
                counts: OpCounts {
                    n_mac: 200_520_000,
                    ..OpCounts::default()
                },
                kind: NetworkKind::Ann,
                published_compute_uj: 922.4,
            },
            ReferenceRow {
                model: "SNN (T=32)",
                counts: snn(26_060_000, ALEXNET_NEURONS, 32),
                kind: NetworkKind::Snn,
                published_compute_uj: 6.55,
            },
            ReferenceRow {
                model: "QSNN (T=4)",
                counts: snn(460_000, ALEXNET_NEURONS, 4),
                kind: NetworkKind::Snn,
                published_compute_uj: 0.73,
            },
            ReferenceRow {
                model: "QDSNN (upper bound)",
                counts: snn(270_000, QDSNN_BOUND_NEURONS, 32),
                kind: NetworkKind::Snn,
                published_compute_uj: 3.70,
            },
        ]
    }

    pub fn energy(row: &ReferenceRow, consts: &EnergyConstants) -> EnergyReport {
        match row.kind {
            NetworkKind::Ann => energy_ann(&row.counts, consts),
            NetworkKind::Snn => energy_snn(&row.counts, consts),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::arch::TopologyExit;
    use crate::layer::LayerKind;

    const UJ: f64 = 1e-6;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn ann_energy() {
        let c = EnergyConstants::default();
        let r = energy_ann(&OpCounts { n_mac: 200_520_000, ..Default::default() }, &c);
        assert!(close(r.e_total / UJ, 922.4, 0.01));
        assert_eq!(energy_ann(&OpCounts::default(), &c).e_total, 0.0);
        let one = energy_ann(&OpCounts { n_mac: 1, mem_bytes: 1, ..Default::default() }, &c);
        assert!((one.e_total - 84.6e-12).abs() < 1e-24);
    }

    #[test]
    fn snn_energy() {
        let c = EnergyConstants::default();
        let r = energy_snn(
            &OpCounts { n_ac: 26_060_000, n_neurons: 180_234, timesteps: 32, ..Default::default() },
            &c,
        );
        assert!(close(r.e_spike / UJ, 0.78, 0.01));
        assert!(close(r.e_lif / UJ, 5.77, 0.01));
        assert!(close(r.e_total / UJ, 6.55, 0.01));
        let q = energy_snn(
            &OpCounts { n_ac: 460_000, n_neurons: 180_234, timesteps: 4, ..Default::default() },
            &c,
        );
        assert!(close(q.e_spike / UJ, 0.014, 0.02));
        assert!(close(q.e_lif / UJ, 0.72, 0.01));
        assert!(close(q.e_total / UJ, 0.73, 0.01));
        assert_eq!(energy_snn(&OpCounts::default(), &c).e_total, 0.0);
    }

    #[test]
    fn snn_energy_is_linear_in_counts() {
        let c = EnergyConstants::default();
        let base = OpCounts { n_ac: 1234, n_neurons: 10, timesteps: 4, mem_bytes: 7, ..Default::default() };
        let doubled = OpCounts { n_ac: 2468, ..base };
        assert_eq!(energy_snn(&doubled, &c).e_spike, 2.0 * energy_snn(&base, &c).e_spike);
    }

    #[test]
    fn report_components_sum() {
        let c = EnergyConstants::default();
        let r = energy_snn(&OpCounts { n_ac: 99, n_neurons: 3, timesteps: 5, mem_bytes: 11, ..Default::default() }, &c);
        assert!((r.e_total - (r.e_spike + r.e_lif + r.e_mem)).abs() <= 1e-15 * r.e_total);
    }

    #[test]
    fn power_cases() {
        assert!((power(2.68e-3, 2.2e-3).unwrap() - 1.218).abs() < 1e-3);
        assert_eq!(power(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(power(0.0, 3.0).unwrap(), 0.0);
        assert!(power(1.0, 0.0).is_err());
        assert!(power(1.0, -1.0).is_err());
    }

    fn single_linear() -> Topology {
        Topology {
            name: "fc".into(),
            input_shape: vec![10],
            classes: 10,
            backbone: vec![LayerKind::linear(10, 10)],
            exits: Vec::<TopologyExit>::new(),
        }
    }

    #[test]
    fn memory_counting_rule() {
        assert_eq!(memory_bytes(&single_linear(), MemoryVariant::AnnFp32, 1).unwrap(), 480);
        assert_eq!(memory_bytes(&single_linear(), MemoryVariant::AnnInt8, 1).unwrap(), 100 + 20);
        assert_eq!(memory_bytes(&single_linear(), MemoryVariant::SnnInt8, 4).unwrap(), 100 + 20 * 4);
        let empty = Topology {
            backbone: vec![LayerKind::Relu],
            ..single_linear()
        };
        assert_eq!(memory_bytes(&empty, MemoryVariant::AnnFp32, 1).unwrap(), 0);
    }

    #[test]
    fn default_constants_are_valid() {
        EnergyConstants::default().validate().unwrap();
        let bad = EnergyConstants { e_ac: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}

//! End-to-end stages: train, quantize, convert, learn a policy, evaluate, report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::arch::NetworkSpec;
use crate::ann::network::BranchyNetwork;
use crate::ann::train::{eval_ann, train_ann_with, EpochMetrics, TrainHistory};
use crate::config::{GateSection, RunConfig};
use crate::data::{load_mnist, Dataset, Split, CLASSES};
use crate::energy::{energy_ann, energy_snn, memory_bytes_through, EnergyConstants, EnergyReport, MemoryVariant, NetworkKind};
use crate::error::{Error, Result};
use crate::exit::{
    exit_histogram, exit_table, run_dataset, savings_table, summarize, EncodeConfig, ExitHistogram, ExitRule, ExitRun,
    ExitSummary,
};
use crate::opcount::{MeanOpCounts, OpCounts};
use crate::quant::{qat_finetune, QatReport};
use crate::rl::{train_policy, PolicyTraining};
use crate::snn::{convert_ann_to_snn, ConversionConfig, SpikingNetwork};

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    load_mnist(&cfg.data_dir, split)
}

/// Test samples evaluated by the run (the first `eval.test_samples`, or all).
pub fn eval_subset(cfg: &RunConfig, test: &Dataset) -> Dataset {
    match cfg.eval.test_samples {
        0 => test.clone(),
        n => test.head(n),
    }
}

pub fn build_network(cfg: &RunConfig) -> Result<BranchyNetwork> {
    Ok(BranchyNetwork::new(NetworkSpec::from_topology(&cfg.architecture.topology(), cfg.seed)?))
}

pub fn train_ann_stage(
    cfg: &RunConfig,
    train: &Dataset,
    progress: impl FnMut(&EpochMetrics),
) -> Result<(BranchyNetwork, TrainHistory)> {
    let mut net = build_network(cfg)?;
    let history = train_ann_with(&mut net, train, &cfg.train, progress)?;
    Ok((net, history))
}

/// Quantization-aware fine-tuning of a copy of `net`.
pub fn qat_stage(cfg: &RunConfig, net: &BranchyNetwork, train: &Dataset) -> Result<(BranchyNetwork, QatReport)> {
    if net.is_quantized() {
        return Err(Error::Usage("network is already quantized".into()));
    }
    let mut q = net.clone();
    let report = qat_finetune(&mut q, train, &cfg.qat)?;
    Ok((q, report))
}

/// Converts with the baseline window, or the short window for a quantized network.
pub fn convert_stage(cfg: &RunConfig, net: &BranchyNetwork, train: &Dataset) -> Result<SpikingNetwork> {
    let calib = train.sample(cfg.conversion.calibration_samples, cfg.seed);
    let conv = ConversionConfig {
        lif: cfg.lif_for(net.is_quantized()),
        percentile: cfg.conversion.percentile,
    };
    convert_ann_to_snn(net, calib.images(), &conv)
}

pub fn encode_config(cfg: &RunConfig) -> EncodeConfig {
    EncodeConfig {
        seed: cfg.encode_seed(),
        batch: cfg.eval.batch,
    }
}

/// Learns the exit policy from full-depth outcomes on a training subset.
pub fn policy_stage(cfg: &RunConfig, snet: &SpikingNetwork, train: &Dataset) -> Result<PolicyTraining> {
    let subset = train.sample(cfg.policy.samples, cfg.seed.wrapping_add(2));
    let table = exit_table(snet, &subset, &encode_config(cfg))?;
    let savings = savings_table(&snet.profile()?)?;
    train_policy(&table, &savings, &cfg.policy.hyper)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub kind: NetworkKind,
    pub rule: String,
    pub samples: usize,
    pub accuracy: f64,
    /// Accuracy of every decision point at full depth (ANN variants only).
    pub exit_accuracy: Vec<f64>,
    pub timesteps: u64,
    pub mean_ops: MeanOpCounts,
    /// MACs for ANN variants, spike-triggered ACs for spiking ones.
    pub synaptic_ops: f64,
    pub exit_fractions: Vec<f64>,
    /// Mean energy per inference.
    pub energy: EnergyReport,
    pub fallbacks: u64,
}

/// Full-depth ANN evaluation with static MAC and memory counts.
pub fn ann_metrics(variant: &str, net: &BranchyNetwork, test: &Dataset, consts: &EnergyConstants) -> Result<VariantMetrics> {
    let report = eval_ann(net, test)?;
    let profile = crate::opcount::profile_network(&net.spec.topology())?;
    let last = profile.exit_count() - 1;
    let mem = if net.is_quantized() {
        MemoryVariant::AnnInt8
    } else {
        MemoryVariant::AnnFp32
    };
    let counts = OpCounts {
        n_mac: profile.cumulative_macs[last],
        mem_bytes: memory_bytes_through(&profile, mem, 1, last),
        ..OpCounts::default()
    };
    let mut fractions = vec![0.0; profile.exit_count()];
    fractions[last] = 1.0;
    Ok(VariantMetrics {
        variant: variant.into(),
        kind: NetworkKind::Ann,
        rule: "full-depth".into(),
        samples: report.samples,
        accuracy: report.final_accuracy(),
        exit_accuracy: report.accuracy.clone(),
        timesteps: 0,
        mean_ops: MeanOpCounts::from_total(&counts, 1),
        synaptic_ops: counts.n_mac as f64,
        exit_fractions: fractions,
        energy: energy_ann(&counts, consts),
        fallbacks: 0,
    })
}

fn add_reports(a: &EnergyReport, b: &EnergyReport) -> EnergyReport {
    EnergyReport {
        kind: a.kind,
        e_mac: a.e_mac + b.e_mac,
        e_spike: a.e_spike + b.e_spike,
        e_lif: a.e_lif + b.e_lif,
        e_mem: a.e_mem + b.e_mem,
        e_compute: a.e_compute + b.e_compute,
        e_total: a.e_total + b.e_total,
    }
}

/// Mean per-inference energy of realized spiking runs.
pub fn mean_snn_energy(run: &ExitRun, consts: &EnergyConstants) -> EnergyReport {
    let zero = energy_snn(&OpCounts::default(), consts);
    let sum = run.traces.iter().fold(zero, |acc, t| add_reports(&acc, &energy_snn(&t.ops, consts)));
    sum.scaled(1.0 / run.traces.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct SpikingEvaluation {
    pub metrics: VariantMetrics,
    pub summary: ExitSummary,
    pub run: ExitRun,
    pub histogram: ExitHistogram,
}

pub fn snn_metrics(
    variant: &str,
    snet: &SpikingNetwork,
    test: &Dataset,
    rule: &dyn ExitRule,
    enc: &EncodeConfig,
    consts: &EnergyConstants,
) -> Result<SpikingEvaluation> {
    let exits = snet.exit_count();
    let run = run_dataset(snet, test, rule, enc)?;
    let summary = summarize(&run.rule, &run.traces, exits);
    let histogram = exit_histogram(&run.traces, exits, CLASSES.max(snet.classes))?;
    let metrics = VariantMetrics {
        variant: variant.into(),
        kind: NetworkKind::Snn,
        rule: run.rule.clone(),
        samples: summary.samples,
        accuracy: summary.accuracy,
        exit_accuracy: Vec::new(),
        timesteps: snet.timesteps() as u64,
        mean_ops: summary.mean_ops,
        synaptic_ops: summary.mean_ops.n_ac,
        exit_fractions: summary.exit_fractions.clone(),
        energy: mean_snn_energy(&run, consts),
        fallbacks: summary.fallbacks,
    };
    Ok(SpikingEvaluation {
        metrics,
        summary,
        run,
        histogram,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub gate: String,
    pub passed: bool,
    pub detail: String,
}

fn gate(gate: &str, passed: bool, detail: String) -> GateOutcome {
    GateOutcome {
        gate: gate.into(),
        passed,
        detail,
    }
}

/// Accuracy, dominance, ops-ratio and exit-spread gates over whichever variants are present.
pub fn check_gates(g: &GateSection, variants: &[VariantMetrics]) -> Vec<GateOutcome> {
    let find = |name: &str| variants.iter().find(|v| v.variant == name);
    let mut out = Vec::new();
    for (name, min) in [("ann", g.ann_min_accuracy), ("snn", g.snn_min_accuracy), ("qsnn", g.qsnn_min_accuracy)] {
        if let Some(v) = find(name) {
            out.push(gate(
                &format!("{name}-accuracy"),
                v.accuracy >= min,
                format!("{:.4} >= {min}", v.accuracy),
            ));
        }
    }
    let Some(base) = find("qsnn") else {
        return out;
    };
    for name in ["qdsnn-threshold", "qdsnn-policy"] {
        let Some(v) = find(name) else { continue };
        let floor = base.accuracy - g.dominance_tolerance;
        out.push(gate(
            &format!("{name}-accuracy"),
            v.accuracy >= floor,
            format!("{:.4} >= qsnn {:.4} - {}", v.accuracy, base.accuracy, g.dominance_tolerance),
        ));
        let ratio = v.synaptic_ops / base.synaptic_ops.max(f64::MIN_POSITIVE);
        if name == "qdsnn-threshold" {
            out.push(gate(&format!("{name}-ops"), ratio <= g.max_ops_ratio, format!("ratio {ratio:.4} <= {}", g.max_ops_ratio)));
            let populated = v.exit_fractions.iter().filter(|&&f| f >= g.min_exit_fraction).count();
            out.push(gate(
                &format!("{name}-exit-spread"),
                populated >= g.min_populated_exits,
                format!("{populated} exits with >= {} of samples {:?}", g.min_exit_fraction, v.exit_fractions),
            ));
        } else {
            out.push(gate(&format!("{name}-ops"), ratio < 1.0, format!("ratio {ratio:.4} < 1")));
        }
    }
    out
}

/// One row per variant: accuracy, operation counts and energy in microjoules.
pub fn write_report_csv(path: &Path, variants: &[VariantMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant",
        "rule",
        "samples",
        "accuracy",
        "timesteps",
        "synaptic_ops",
        "n_mac",
        "n_ac",
        "n_ac_synaptic",
        "n_lif",
        "mem_bytes",
        "e_spike_uj",
        "e_lif_uj",
        "e_compute_uj",
        "e_mem_uj",
        "e_total_uj",
        "exit_fractions",
    ])?;
    let uj = |j: f64| format!("{:.6}", j * 1e6);
    for v in variants {
        let fr: Vec<String> = v.exit_fractions.iter().map(|f| format!("{f:.4}")).collect();
        w.write_record([
            v.variant.clone(),
            v.rule.clone(),
            v.samples.to_string(),
            format!("{:.4}", v.accuracy),
            v.timesteps.to_string(),
            format!("{:.3}", v.synaptic_ops),
            format!("{:.3}", v.mean_ops.n_mac),
            format!("{:.3}", v.mean_ops.n_ac),
            format!("{:.3}", v.mean_ops.n_ac_synaptic),
            format!("{:.3}", v.mean_ops.n_lif),
            format!("{:.3}", v.mean_ops.mem_bytes),
            uj(v.energy.e_spike),
            uj(v.energy.e_lif),
            uj(v.energy.e_compute),
            uj(v.energy.e_mem),
            uj(v.energy.e_total),
            fr.join("/"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

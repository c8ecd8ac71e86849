//! Dynamic inference: per-exit confidence, threshold or learned exit rules,
//! realized operation counts, traces and exit histograms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::{memory_bytes_through, MemoryVariant};
use crate::error::{Error, Result};
use crate::opcount::{MeanOpCounts, OpCounts, StaticProfile};
use crate::rl::{discretize_confidence, Action, ExitTable, QTable};
use crate::snn::{
    ac_count, ac_count_synaptic, encode_sample, lif_op_count, ExitDecision, SampleRun, SpikeStats, SpikeTotals,
    SpikingNetwork,
};
use crate::tensor::{argmax, softmax};

/// Maximum softmax probability.
pub fn confidence(logits: &[f64]) -> Result<f64> {
    Ok(softmax(logits)?.into_iter().fold(0.0, f64::max))
}

/// Confidence of a spiking readout, taken on its time-averaged logits.
pub fn readout_confidence(accumulated: &[f64], timesteps: usize) -> Result<f64> {
    let t = timesteps.max(1) as f64;
    let mean: Vec<f64> = accumulated.iter().map(|v| v / t).collect();
    confidence(&mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// One threshold per early exit.
    pub thresholds: Vec<f64>,
}

impl ThresholdConfig {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        let cfg = ThresholdConfig { thresholds };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("exit threshold {bad} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Decides at an early exit whether a sample leaves.
pub trait ExitRule {
    fn name(&self) -> String;

    /// Number of early exits the rule is configured for; `None` if any.
    fn early_exits(&self) -> Option<usize>;

    fn decide(&self, exit: usize, confidence: f64) -> ExitDecision;

    /// True when the decision came from an untrained state.
    fn is_fallback(&self, _exit: usize, _confidence: f64) -> bool {
        false
    }
}

impl ExitRule for ThresholdConfig {
    fn name(&self) -> String {
        let parts: Vec<String> = self.thresholds.iter().map(|t| t.to_string()).collect();
        format!("threshold:{}", parts.join("/"))
    }

    fn early_exits(&self) -> Option<usize> {
        Some(self.thresholds.len())
    }

    fn decide(&self, exit: usize, confidence: f64) -> ExitDecision {
        if confidence >= self.thresholds[exit] {
            ExitDecision::Exit
        } else {
            ExitDecision::Continue
        }
    }
}

impl ExitRule for QTable {
    fn name(&self) -> String {
        "policy".into()
    }

    fn early_exits(&self) -> Option<usize> {
        Some(self.exits.saturating_sub(1))
    }

    fn decide(&self, exit: usize, confidence: f64) -> ExitDecision {
        match self.greedy(exit, discretize_confidence(confidence, self.bins)) {
            Action::ExitNow => ExitDecision::Exit,
            Action::Continue => ExitDecision::Continue,
        }
    }

    fn is_fallback(&self, exit: usize, confidence: f64) -> bool {
        self.visits(exit, discretize_confidence(confidence, self.bins)) == [0, 0]
    }
}

/// Never exits early; the full-depth baseline.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlwaysContinue;

impl ExitRule for AlwaysContinue {
    fn name(&self) -> String {
        "always-continue".into()
    }

    fn early_exits(&self) -> Option<usize> {
        None
    }

    fn decide(&self, _exit: usize, _confidence: f64) -> ExitDecision {
        ExitDecision::Continue
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitDecisionTrace {
    pub sample_id: u64,
    pub exit: usize,
    /// Confidence at every visited exit, in depth order.
    pub confidences: Vec<f64>,
    pub predicted: usize,
    pub label: usize,
    pub ops: OpCounts,
    /// Decisions taken in states the policy never visited during training.
    pub fallbacks: u32,
}

impl ExitDecisionTrace {
    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

/// `1 - cumulative MACs through exit / cumulative MACs of the full network`.
pub fn compute_savings(exit: usize, profile: &StaticProfile) -> Result<f64> {
    let through = *profile
        .cumulative_macs
        .get(exit)
        .ok_or_else(|| Error::Usage(format!("exit {exit} beyond {} decision points", profile.exit_count())))?;
    let full = *profile.cumulative_macs.last().expect("final exit");
    Ok(if full == 0 { 0.0 } else { 1.0 - through as f64 / full as f64 })
}

/// Savings of every decision point, final last (always 0).
pub fn savings_table(profile: &StaticProfile) -> Result<Vec<f64>> {
    (0..profile.exit_count()).map(|e| compute_savings(e, profile)).collect()
}

/// Operation counts actually spent by one simulated sample.
pub fn realized_ops(stats: &SpikeStats, profile: &StaticProfile, exit: usize, quantized: bool) -> Result<OpCounts> {
    let t = stats.timesteps as u64;
    let variant = if quantized {
        MemoryVariant::SnnInt8
    } else {
        MemoryVariant::SnnFp32
    };
    Ok(OpCounts {
        n_mac: 0,
        n_ac: ac_count(stats),
        n_ac_synaptic: ac_count_synaptic(stats),
        n_lif: lif_op_count(profile, t, exit)?,
        n_neurons: profile.cumulative_neurons[exit],
        timesteps: t,
        mem_bytes: memory_bytes_through(profile, variant, t, exit),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeConfig {
    pub seed: u64,
    /// Samples simulated together.
    pub batch: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig { seed: 0, batch: 100 }
    }
}

fn check_rule(snet: &SpikingNetwork, rule: &dyn ExitRule) -> Result<()> {
    match rule.early_exits() {
        Some(n) if n != snet.exits.len() => Err(Error::Config(format!(
            "{} configured for {n} early exits, network has {}",
            rule.name(),
            snet.exits.len()
        ))),
        _ => Ok(()),
    }
}

/// Simulates `images` (sample ids `ids`) under `rule`. Returns one trace per sample
/// and the raw runs.
pub fn infer_batch(
    snet: &SpikingNetwork,
    profile: &StaticProfile,
    samples: &[(u64, &[f64], usize)],
    rule: &dyn ExitRule,
    seed: u64,
) -> Result<Vec<(ExitDecisionTrace, SampleRun)>> {
    check_rule(snet, rule)?;
    let t = snet.timesteps();
    let trains = samples
        .iter()
        .map(|&(id, img, _)| {
            let img = crate::tensor::Tensor::new(snet.input_shape.clone(), img.to_vec())?;
            encode_sample(&img, t, seed, id)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confs: Vec<Vec<f64>> = vec![Vec::new(); samples.len()];
    let mut fallbacks = vec![0u32; samples.len()];
    let mut failure = None;
    let runs = snet.simulate(&trains, |k, exit, logits| match readout_confidence(logits, t) {
        Ok(c) => {
            confs[k].push(c);
            if rule.is_fallback(exit, c) {
                fallbacks[k] += 1;
            }
            rule.decide(exit, c)
        }
        Err(e) => {
            failure.get_or_insert(e);
            ExitDecision::Continue
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    runs.into_iter()
        .enumerate()
        .map(|(k, run)| {
            let (id, _, label) = samples[k];
            let mut confidences = std::mem::take(&mut confs[k]);
            if run.exit == snet.exits.len() {
                confidences.push(readout_confidence(&run.logits[run.exit], t)?);
            }
            let trace = ExitDecisionTrace {
                sample_id: id,
                exit: run.exit,
                confidences,
                predicted: argmax(&run.logits[run.exit])?,
                label,
                ops: realized_ops(&run.stats, profile, run.exit, snet.quantized)?,
                fallbacks: fallbacks[k],
            };
            Ok((trace, run))
        })
        .collect()
}

/// Dynamic inference of one encoded sample under fixed thresholds.
pub fn infer_threshold(
    snet: &SpikingNetwork,
    sample: (u64, &[f64], usize),
    cfg: &ThresholdConfig,
    seed: u64,
) -> Result<(ExitDecisionTrace, SampleRun)> {
    cfg.validate()?;
    let profile = snet.profile()?;
    Ok(infer_batch(snet, &profile, &[sample], cfg, seed)?.remove(0))
}

/// Dynamic inference of one encoded sample under a greedy Q-policy.
pub fn infer_policy(
    snet: &SpikingNetwork,
    sample: (u64, &[f64], usize),
    qt: &QTable,
    seed: u64,
) -> Result<(ExitDecisionTrace, SampleRun)> {
    let profile = snet.profile()?;
    Ok(infer_batch(snet, &profile, &[sample], qt, seed)?.remove(0))
}

/// Traces and aggregated spike counts of a dataset run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExitRun {
    pub rule: String,
    pub traces: Vec<ExitDecisionTrace>,
    pub spikes: SpikeTotals,
}

/// Runs every sample of `ds` under `rule`; sample ids are dataset indices.
pub fn run_dataset(snet: &SpikingNetwork, ds: &Dataset, rule: &dyn ExitRule, enc: &EncodeConfig) -> Result<ExitRun> {
    check_rule(snet, rule)?;
    let profile = snet.profile()?;
    let mut out = ExitRun {
        rule: rule.name(),
        traces: Vec::with_capacity(ds.len()),
        spikes: SpikeTotals::default(),
    };
    let ids: Vec<usize> = (0..ds.len()).collect();
    for chunk in ids.chunks(enc.batch.max(1)) {
        let samples: Vec<(u64, &[f64], usize)> = chunk.iter().map(|&i| (i as u64, ds.image(i), ds.labels()[i])).collect();
        for (trace, run) in infer_batch(snet, &profile, &samples, rule, enc.seed)? {
            out.spikes.add(&run.stats);
            out.traces.push(trace);
        }
    }
    Ok(out)
}

/// Confidence and correctness of every sample at every exit, for policy training.
pub fn exit_table(snet: &SpikingNetwork, ds: &Dataset, enc: &EncodeConfig) -> Result<ExitTable> {
    let t = snet.timesteps();
    let mut table = ExitTable::default();
    let profile = snet.profile()?;
    let ids: Vec<usize> = (0..ds.len()).collect();
    for chunk in ids.chunks(enc.batch.max(1)) {
        let samples: Vec<(u64, &[f64], usize)> = chunk.iter().map(|&i| (i as u64, ds.image(i), ds.labels()[i])).collect();
        for (trace, run) in infer_batch(snet, &profile, &samples, &AlwaysContinue, enc.seed)? {
            let mut conf = Vec::with_capacity(run.logits.len());
            let mut correct = Vec::with_capacity(run.logits.len());
            for logits in &run.logits {
                conf.push(readout_confidence(logits, t)?);
                correct.push(argmax(logits)? == trace.label);
            }
            table.confidence.push(conf);
            table.correct.push(correct);
        }
    }
    Ok(table)
}

/// Samples routed to each exit, per class: `counts[class][exit]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitHistogram {
    pub exits: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ExitHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn per_exit(&self) -> Vec<u64> {
        (0..self.exits).map(|e| self.counts.iter().map(|row| row[e]).sum()).collect()
    }

    pub fn exit_fractions(&self) -> Vec<f64> {
        let total = self.total().max(1) as f64;
        self.per_exit().iter().map(|&c| c as f64 / total).collect()
    }

    /// Wide CSV: one row per class with counts and percentages per exit, then a total row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["class".to_string()];
        header.extend((0..self.exits).map(|e| format!("exit_{e}")));
        header.extend((0..self.exits).map(|e| format!("exit_{e}_pct")));
        header.push("total".into());
        w.write_record(&header)?;
        let mut row_out = |name: String, row: &[u64]| -> Result<()> {
            let total: u64 = row.iter().sum();
            let mut rec = vec![name];
            rec.extend(row.iter().map(u64::to_string));
            rec.extend(row.iter().map(|&c| format!("{:.2}", 100.0 * c as f64 / total.max(1) as f64)));
            rec.push(total.to_string());
            w.write_record(&rec)?;
            Ok(())
        };
        for (class, row) in self.counts.iter().enumerate() {
            row_out(class.to_string(), row)?;
        }
        row_out("all".into(), &self.per_exit())?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Per-exit, per-class distribution of `traces`.
pub fn exit_histogram(traces: &[ExitDecisionTrace], exits: usize, classes: usize) -> Result<ExitHistogram> {
    if traces.is_empty() {
        return Err(Error::Usage("exit histogram of no traces".into()));
    }
    let mut counts = vec![vec![0u64; exits]; classes];
    for t in traces {
        if t.exit >= exits || t.label >= classes {
            return Err(Error::Usage(format!(
                "trace of sample {} has exit {} / label {} outside {exits} exits / {classes} classes",
                t.sample_id, t.exit, t.label
            )));
        }
        counts[t.label][t.exit] += 1;
    }
    Ok(ExitHistogram { exits, counts })
}

/// Writes `(sample_id, exit, confidence_1..k, predicted, label, ac_ops, lif_ops)` rows.
pub fn write_traces_csv(path: &Path, traces: &[ExitDecisionTrace], exits: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "exit".into()];
    header.extend((1..=exits).map(|e| format!("confidence_{e}")));
    header.extend(["predicted", "label", "ac_ops", "lif_ops"].map(String::from));
    w.write_record(&header)?;
    for t in traces {
        let mut rec = vec![t.sample_id.to_string(), t.exit.to_string()];
        rec.extend((0..exits).map(|e| t.confidences.get(e).map_or(String::new(), |c| c.to_string())));
        rec.extend([t.predicted, t.label].map(|v| v.to_string()));
        rec.extend([t.ops.n_ac, t.ops.n_lif].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitSummary {
    pub rule: String,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_ops: MeanOpCounts,
    pub exit_fractions: Vec<f64>,
    pub fallbacks: u64,
}

pub fn summarize(rule: &str, traces: &[ExitDecisionTrace], exits: usize) -> ExitSummary {
    let mut total = OpCounts::default();
    let mut per_exit = vec![0u64; exits];
    for t in traces {
        total += t.ops;
        if let Some(c) = per_exit.get_mut(t.exit) {
            *c += 1;
        }
    }
    let n = traces.len();
    ExitSummary {
        rule: rule.into(),
        samples: n,
        accuracy: traces.iter().filter(|t| t.correct()).count() as f64 / n.max(1) as f64,
        mean_ops: MeanOpCounts::from_total(&total, n as u64),
        exit_fractions: per_exit.iter().map(|&c| c as f64 / n.max(1) as f64).collect(),
        fallbacks: traces.iter().map(|t| t.fallbacks as u64).sum(),
    }
}

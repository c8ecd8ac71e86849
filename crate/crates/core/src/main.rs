use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use qdsnn::ann::arch::Architecture;
use qdsnn::ann::network::BranchyNetwork;
use qdsnn::ann::train::EpochMetrics;
use qdsnn::checkpoint::{self, KIND_ANN, KIND_QTABLE, KIND_SNN};
use qdsnn::config::RunConfig;
use qdsnn::data::Split;
use qdsnn::energy::reference::{alexnet_rows, energy};
use qdsnn::energy::{memory_bytes, EnergyConstants, MemoryVariant};
use qdsnn::exit::{write_traces_csv, AlwaysContinue, ExitRule, ThresholdConfig};
use qdsnn::opcount::profile_network;
use qdsnn::pipeline::{
    ann_metrics, check_gates, convert_stage, encode_config, eval_subset, load_split, policy_stage, qat_stage,
    snn_metrics, train_ann_stage, write_json, write_report_csv, GateOutcome, SpikingEvaluation, VariantMetrics,
};
use qdsnn::rl::QTable;
use qdsnn::snn::SpikingNetwork;

#[derive(Parser)]
#[command(name = "qdsnn", version, about = "Quantized dynamic spiking network pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Fail with a nonzero status when an acceptance gate fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the branchy ANN.
    TrainAnn {
        #[command(flatten)]
        common: Common,
    },
    /// Quantization-aware fine-tuning of a trained ANN.
    Qat {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ann: PathBuf,
    },
    /// Convert an ANN (quantized or not) to a spiking network.
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ann: PathBuf,
    },
    /// Learn the exit policy of a spiking network.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snn: PathBuf,
    },
    /// Dynamic inference on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snn: PathBuf,
        /// Greedy Q-policy file.
        #[arg(long, conflicts_with_all = ["thresholds", "full"])]
        policy: Option<PathBuf>,
        /// Comma-separated thresholds, e.g. 0.6,0.7.
        #[arg(long, value_delimiter = ',', conflicts_with = "full")]
        thresholds: Option<Vec<f64>>,
        /// Disable early exits.
        #[arg(long)]
        full: bool,
        /// Variant name in the metrics.
        #[arg(long)]
        name: Option<String>,
    },
    /// Combine the metrics of several run directories into one table.
    Report {
        #[arg(long)]
        out: PathBuf,
        runs: Vec<PathBuf>,
    },
    /// Every stage from training to report.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Published-count energy tables and static profiles.
    EnergyTables {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct Metrics {
    variants: Vec<VariantMetrics>,
    gates: Vec<GateOutcome>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    tool_version: &'a str,
    started_unix: u64,
    finished_unix: u64,
    elapsed_s: f64,
    config: &'a str,
}

struct Run {
    cfg: RunConfig,
    config_text: String,
    out: PathBuf,
    strict: bool,
    command: &'static str,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    fn open(common: &Common, command: &'static str) -> anyhow::Result<Self> {
        let (mut cfg, config_text) = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &common.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        std::fs::write(cfg.out_dir.join("config.toml"), &config_text)?;
        Ok(Run {
            out: cfg.out_dir.clone(),
            cfg,
            config_text,
            strict: common.strict,
            command,
            started: SystemTime::now(),
            clock: Instant::now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self, variants: Vec<VariantMetrics>) -> anyhow::Result<()> {
        let gates = check_gates(&self.cfg.gates, &variants);
        for g in &gates {
            eprintln!("gate {:<28} {}  {}", g.gate, if g.passed { "PASS" } else { "FAIL" }, g.detail);
        }
        let failed: Vec<&str> = gates.iter().filter(|g| !g.passed).map(|g| g.gate.as_str()).collect();
        write_json(&self.path("metrics.json"), &Metrics { variants, gates: gates.clone() })?;
        let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        write_json(
            &self.path("provenance.json"),
            &Provenance {
                command: self.command,
                tool_version: env!("CARGO_PKG_VERSION"),
                started_unix: unix(self.started),
                finished_unix: unix(SystemTime::now()),
                elapsed_s: self.clock.elapsed().as_secs_f64(),
                config: &self.config_text,
            },
        )?;
        if self.strict && !failed.is_empty() {
            return Err(qdsnn::Error::Gate(failed.join(", ")).into());
        }
        Ok(())
    }
}

fn log_epoch(stage: &str) -> impl FnMut(&EpochMetrics) + '_ {
    move |m| {
        let acc: Vec<String> = m.train_accuracy.iter().map(|a| format!("{a:.4}")).collect();
        eprintln!("[{stage}] epoch {:>3}  loss {:.4}  lr {:.2e}  train acc {}", m.epoch, m.loss, m.lr_end, acc.join("/"));
    }
}

fn write_epochs(path: &Path, epochs: &[EpochMetrics]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "lr_end", "train_accuracy"])?;
    for m in epochs {
        let acc: Vec<String> = m.train_accuracy.iter().map(|a| a.to_string()).collect();
        w.write_record([m.epoch.to_string(), m.loss.to_string(), m.lr_end.to_string(), acc.join("/")])?;
    }
    w.flush()?;
    Ok(())
}

fn write_scales(path: &Path, snet: &SpikingNetwork) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "lambda"])?;
    for s in &snet.scales {
        w.write_record([s.layer.clone(), s.lambda.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn spiking_variant_name(snet: &SpikingNetwork, mode: &str) -> String {
    match (mode, snet.quantized) {
        ("full", true) => "qsnn".into(),
        ("full", false) => "snn".into(),
        (m, true) => format!("qdsnn-{m}"),
        (m, false) => format!("dsnn-{m}"),
    }
}

fn write_evaluation(run: &Run, ev: &SpikingEvaluation, suffix: &str) -> anyhow::Result<()> {
    let exits = ev.histogram.exits;
    write_traces_csv(&run.path(&format!("traces{suffix}.csv")), &ev.run.traces, exits)?;
    ev.histogram.write_csv(&run.path(&format!("histogram{suffix}.csv")))?;
    ev.run.spikes.write_csv(&run.path(&format!("spikes{suffix}.csv")))?;
    write_json(&run.path(&format!("energy{suffix}.json")), &ev.metrics.energy)?;
    let m = &ev.metrics;
    eprintln!(
        "[{}] accuracy {:.4}  mean AC {:.1}  mean LIF ops {:.0}  exits {:?}",
        m.variant, m.accuracy, m.mean_ops.n_ac, m.mean_ops.n_lif, m.exit_fractions
    );
    Ok(())
}

fn cmd_train_ann(common: &Common) -> anyhow::Result<()> {
    let run = Run::open(common, "train-ann")?;
    let train = load_split(&run.cfg, Split::Train)?;
    let test = eval_subset(&run.cfg, &load_split(&run.cfg, Split::Test)?);
    let (net, history) = train_ann_stage(&run.cfg, &train, log_epoch("train"))?;
    checkpoint::save(&run.path("ann.json"), KIND_ANN, &net)?;
    write_epochs(&run.path("train_history.csv"), &history.epochs)?;
    let m = ann_metrics("ann", &net, &test, &EnergyConstants::default())?;
    eprintln!("[ann] test accuracy per exit {:?}", m.exit_accuracy);
    run.finish(vec![m])
}

fn cmd_qat(common: &Common, ann: &Path) -> anyhow::Result<()> {
    let run = Run::open(common, "qat")?;
    let net: BranchyNetwork = checkpoint::load(ann, KIND_ANN)?;
    let train = load_split(&run.cfg, Split::Train)?;
    let test = eval_subset(&run.cfg, &load_split(&run.cfg, Split::Test)?);
    let (qnet, report) = qat_stage(&run.cfg, &net, &train)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    checkpoint::save(&run.path("qann.json"), KIND_ANN, &qnet)?;
    write_epochs(&run.path("qat_history.csv"), &report.epochs)?;
    let mut w = csv::Writer::from_path(run.path("qparams.csv"))?;
    w.write_record(["site", "scale", "zero_point", "mode"])?;
    for r in &report.qparams {
        w.write_record([r.site.clone(), r.scale.to_string(), r.zero_point.to_string(), format!("{:?}", r.mode)])?;
    }
    w.flush()?;
    let m = ann_metrics("qann", &qnet, &test, &EnergyConstants::default())?;
    eprintln!("[qann] test accuracy per exit {:?}", m.exit_accuracy);
    run.finish(vec![m])
}

fn cmd_convert(common: &Common, ann: &Path) -> anyhow::Result<()> {
    let run = Run::open(common, "convert")?;
    let net: BranchyNetwork = checkpoint::load(ann, KIND_ANN)?;
    let train = load_split(&run.cfg, Split::Train)?;
    let snet = convert_stage(&run.cfg, &net, &train)?;
    let name = if snet.quantized { "qsnn" } else { "snn" };
    checkpoint::save(&run.path(&format!("{name}.json")), KIND_SNN, &snet)?;
    write_scales(&run.path(&format!("scales_{name}.csv")), &snet)?;
    eprintln!("[convert] {name} with T={} written", snet.timesteps());
    Ok(())
}

fn cmd_train_policy(common: &Common, snn: &Path) -> anyhow::Result<()> {
    let run = Run::open(common, "train-policy")?;
    let snet: SpikingNetwork = checkpoint::load(snn, KIND_SNN)?;
    let train = load_split(&run.cfg, Split::Train)?;
    let pt = policy_stage(&run.cfg, &snet, &train)?;
    checkpoint::save(&run.path("qtable.json"), KIND_QTABLE, &pt.qtable)?;
    pt.qtable.write_csv(&run.path("qtable.csv"))?;
    pt.write_reward_csv(&run.path("rewards.csv"), run.cfg.policy.hyper.window)?;
    eprintln!("[policy] {} episodes, early stop: {}", pt.history.len(), pt.stopped_early);
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    snn: &Path,
    policy: Option<&Path>,
    thresholds: Option<Vec<f64>>,
    full: bool,
    name: Option<String>,
) -> anyhow::Result<()> {
    let run = Run::open(common, "evaluate")?;
    let snet: SpikingNetwork = checkpoint::load(snn, KIND_SNN)?;
    let test = eval_subset(&run.cfg, &load_split(&run.cfg, Split::Test)?);
    let qt: QTable;
    let th: ThresholdConfig;
    let (rule, mode): (&dyn ExitRule, &str) = if let Some(p) = policy {
        qt = checkpoint::load(p, KIND_QTABLE)?;
        (&qt, "policy")
    } else if full {
        (&AlwaysContinue, "full")
    } else {
        th = match thresholds {
            Some(t) => ThresholdConfig::new(t)?,
            None => run.cfg.thresholds.clone(),
        };
        (&th, "threshold")
    };
    let variant = name.unwrap_or_else(|| spiking_variant_name(&snet, mode));
    let ev = snn_metrics(&variant, &snet, &test, rule, &encode_config(&run.cfg), &EnergyConstants::default())?;
    write_evaluation(&run, &ev, "")?;
    run.finish(vec![ev.metrics])
}

fn cmd_report(out: &Path, runs: &[PathBuf]) -> anyhow::Result<()> {
    if runs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let mut variants = Vec::new();
    for dir in runs {
        let path = dir.join("metrics.json");
        if !path.exists() {
            return Err(qdsnn::Error::MissingArtifact(path).into());
        }
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let list: Vec<VariantMetrics> = serde_json::from_value(v["variants"].clone())
            .with_context(|| format!("reading {}", path.display()))?;
        variants.extend(list);
    }
    std::fs::create_dir_all(out)?;
    write_report_csv(&out.join("report.csv"), &variants)?;
    eprintln!("[report] {} variants -> {}", variants.len(), out.join("report.csv").display());
    Ok(())
}

fn cmd_pipeline(common: &Common) -> anyhow::Result<()> {
    let run = Run::open(common, "pipeline")?;
    let cfg = &run.cfg;
    let consts = EnergyConstants::default();
    let train = load_split(cfg, Split::Train)?;
    let test = eval_subset(cfg, &load_split(cfg, Split::Test)?);
    let enc = encode_config(cfg);

    let (ann, history) = train_ann_stage(cfg, &train, log_epoch("train"))?;
    checkpoint::save(&run.path("ann.json"), KIND_ANN, &ann)?;
    write_epochs(&run.path("train_history.csv"), &history.epochs)?;
    let mut variants = vec![ann_metrics("ann", &ann, &test, &consts)?];
    eprintln!("[ann] test accuracy per exit {:?}", variants[0].exit_accuracy);

    let snet = convert_stage(cfg, &ann, &train)?;
    checkpoint::save(&run.path("snn.json"), KIND_SNN, &snet)?;
    write_scales(&run.path("scales_snn.csv"), &snet)?;
    let ev = snn_metrics("snn", &snet, &test, &AlwaysContinue, &enc, &consts)?;
    write_evaluation(&run, &ev, "_snn")?;
    variants.push(ev.metrics);

    let (qann, qat) = qat_stage(cfg, &ann, &train)?;
    for w in &qat.warnings {
        eprintln!("warning: {w}");
    }
    checkpoint::save(&run.path("qann.json"), KIND_ANN, &qann)?;
    write_epochs(&run.path("qat_history.csv"), &qat.epochs)?;
    variants.push(ann_metrics("qann", &qann, &test, &consts)?);

    let qsnet = convert_stage(cfg, &qann, &train)?;
    checkpoint::save(&run.path("qsnn.json"), KIND_SNN, &qsnet)?;
    write_scales(&run.path("scales_qsnn.csv"), &qsnet)?;
    let ev = snn_metrics("qsnn", &qsnet, &test, &AlwaysContinue, &enc, &consts)?;
    write_evaluation(&run, &ev, "_qsnn")?;
    variants.push(ev.metrics);

    let ev = snn_metrics("qdsnn-threshold", &qsnet, &test, &cfg.thresholds, &enc, &consts)?;
    write_evaluation(&run, &ev, "_qdsnn_threshold")?;
    variants.push(ev.metrics);

    let pt = policy_stage(cfg, &qsnet, &train)?;
    checkpoint::save(&run.path("qtable.json"), KIND_QTABLE, &pt.qtable)?;
    pt.qtable.write_csv(&run.path("qtable.csv"))?;
    pt.write_reward_csv(&run.path("rewards.csv"), cfg.policy.hyper.window)?;
    let ev = snn_metrics("qdsnn-policy", &qsnet, &test, &pt.qtable, &enc, &consts)?;
    write_evaluation(&run, &ev, "_qdsnn_policy")?;
    variants.push(ev.metrics);

    write_report_csv(&run.path("report.csv"), &variants)?;
    run.finish(variants)
}

fn cmd_energy_tables(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let consts = EnergyConstants::default();
    let mut w = csv::Writer::from_path(out.join("energy_reference.csv"))?;
    w.write_record(["model", "n_mac", "n_ac", "n_lif", "e_spike_uj", "e_lif_uj", "e_compute_uj", "published_uj"])?;
    for row in alexnet_rows() {
        let e = energy(&row, &consts);
        w.write_record([
            row.model.to_string(),
            row.counts.n_mac.to_string(),
            row.counts.n_ac.to_string(),
            row.counts.n_lif.to_string(),
            format!("{:.4}", e.e_spike * 1e6),
            format!("{:.4}", e.e_lif * 1e6),
            format!("{:.4}", e.e_compute * 1e6),
            row.published_compute_uj.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("static_profiles.csv"))?;
    w.write_record(["architecture", "decision_point", "cumulative_macs", "cumulative_neurons", "mem_bytes_snn_int8_t4"])?;
    for arch in [Architecture::Mlp, Architecture::Lenet, Architecture::Alexnet] {
        let topo = arch.topology();
        let p = profile_network(&topo)?;
        for e in 0..p.exit_count() {
            w.write_record([
                format!("{arch:?}").to_lowercase(),
                e.to_string(),
                p.cumulative_macs[e].to_string(),
                p.cumulative_neurons[e].to_string(),
                qdsnn::energy::memory_bytes_through(&p, MemoryVariant::SnnInt8, 4, e).to_string(),
            ])?;
        }
        eprintln!(
            "[profile] {:?}: {} MACs, {} neurons, fp32 ANN traffic {} bytes",
            arch,
            p.cumulative_macs.last().copied().unwrap_or(0),
            p.total_neurons,
            memory_bytes(&topo, MemoryVariant::AnnFp32, 1)?
        );
    }
    w.flush()?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainAnn { common } => cmd_train_ann(&common),
        Command::Qat { common, ann } => cmd_qat(&common, &ann),
        Command::Convert { common, ann } => cmd_convert(&common, &ann),
        Command::TrainPolicy { common, snn } => cmd_train_policy(&common, &snn),
        Command::Evaluate {
            common,
            snn,
            policy,
            thresholds,
            full,
            name,
        } => cmd_evaluate(&common, &snn, policy.as_deref(), thresholds, full, name),
        Command::Report { out, runs } => cmd_report(&out, &runs),
        Command::Pipeline { common } => cmd_pipeline(&common),
        Command::EnergyTables { out } => cmd_energy_tables(&out),
    }
}

//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Exact criteria (1, 2, 3, 8, 9, 10) always fail the run when they fail.
//! Empirical MNIST criteria (4, 5, 6, 7, 11) are reported; `QDSNN_STRICT=1`
//! makes every failure fatal. `QDSNN_SKIP_MNIST=1` skips the MNIST pipeline.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use qdsnn::ann::arch::{alexnet_topology, lenet_topology};
use qdsnn::ann::train::eval_ann;
use qdsnn::config::RunConfig;
use qdsnn::data::Split;
use qdsnn::energy::reference::{alexnet_rows, energy, ALEXNET_NEURONS};
use qdsnn::energy::{energy_snn, EnergyConstants};
use qdsnn::exit::{AlwaysContinue, ExitRule};
use qdsnn::layer::LayerKind;
use qdsnn::opcount::{mac_count_conv, mac_count_linear, profile_network, OpCounts};
use qdsnn::pipeline::{
    convert_stage, encode_config, eval_subset, load_split, policy_stage, qat_stage, snn_metrics, train_ann_stage,
    VariantMetrics,
};
use qdsnn::quant::{compute_qparams, fake_quant, MinMaxObserver, QuantMode};
use qdsnn::rl::{train_policy, ExitTable, RlHyper};
use qdsnn::snn::lif_op_count;
use qdsnn::Tensor;

const UJ: f64 = 1e-6;
const EXACT: [u32; 6] = [1, 2, 3, 8, 9, 10];

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(pass: bool, detail: String) -> Outcome {
    if pass {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(value: f64, want: f64, rel: f64) -> bool {
    (value - want).abs() <= rel * want.abs()
}

fn criterion_1() -> Outcome {
    let consts = EnergyConstants::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for row in alexnet_rows() {
        let r = energy(&row, &consts);
        let total = r.e_compute / UJ;
        let pass = if row.model.contains("upper bound") {
            total <= row.published_compute_uj * 1.01
                && row.counts.n_lif <= 7_370_000
                && row.counts.n_ac <= 270_000
        } else {
            within(total, row.published_compute_uj, 0.01)
        };
        ok &= pass;
        parts.push(format!("{} {:.2}uJ (ref {})", row.model, total, row.published_compute_uj));
    }
    let snn = energy_snn(
        &OpCounts {
            n_ac: 26_060_000,
            n_neurons: ALEXNET_NEURONS,
            timesteps: 32,
            ..OpCounts::default()
        },
        &consts,
    );
    let split = within(snn.e_spike / UJ, 0.78, 0.01) && within(snn.e_lif / UJ, 5.77, 0.01);
    ok &= split;
    parts.push(format!("SNN split {:.2}+{:.2}uJ", snn.e_spike / UJ, snn.e_lif / UJ));
    verdict(ok, parts.join("; "))
}

fn criterion_2() -> Outcome {
    let mut topo = alexnet_topology();
    topo.exits.clear();
    let profile = match profile_network(&topo) {
        Ok(p) => p,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let t32 = lif_op_count(&profile, 32, 0).unwrap_or(0);
    let t4 = lif_op_count(&profile, 4, 0).unwrap_or(0);
    verdict(
        profile.backbone_neurons == 180_234 && t32 == 11_534_976 && t4 == 1_441_872,
        format!("neurons {}, T=32 {t32}, T=4 {t4}", profile.backbone_neurons),
    )
}

fn criterion_3() -> Outcome {
    let conv = mac_count_conv(&LayerKind::conv(1, 6, 5, 1, 0), &[1, 28, 28]).unwrap_or(0);
    let lin = mac_count_linear(&LayerKind::linear(784, 512), 1).unwrap_or(0);
    let lenet = profile_network(&lenet_topology()).map(|p| p.backbone[0].macs).unwrap_or(0);
    let alex = profile_network(&alexnet_topology()).map(|p| p.backbone_macs).unwrap_or(0);
    let rel = (alex as f64 - 200.52e6).abs() / 200.52e6;
    verdict(
        conv == 86_400 && lenet == 86_400 && lin == 401_408 && rel <= 0.02,
        format!("conv {conv}, lenet conv1 {lenet}, linear {lin}, alexnet {alex} MACs (rel {rel:.4})"),
    )
}

fn criterion_8() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, env, savings) in common::mdp::scenarios() {
        match common::mdp::check(&env, &savings) {
            Ok(()) => parts.push(format!("{name} ok")),
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    // the bound over random environments with the default hyperparameters
    let h = RlHyper::default();
    let mut runner = TestRunner::new(Config {
        cases: 32,
        failure_persistence: None,
        ..Config::default()
    });
    let rows = prop::collection::vec((0.0f64..=1.0, any::<bool>(), 0.0f64..=1.0, any::<bool>()), 1..40);
    let bound = runner.run(&(rows, 0.0f64..=1.0, any::<u64>()), |(rows, s0, seed)| {
        let env = ExitTable {
            confidence: rows.iter().map(|r| vec![r.0, r.2]).collect(),
            correct: rows.iter().map(|r| vec![r.1, r.3]).collect(),
        };
        let hs = RlHyper {
            seed,
            episodes: 2_000,
            min_episodes: 1_000,
            ..h.clone()
        };
        let out = train_policy(&env, &[s0, 0.0], &hs).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(out.qtable.max_abs() <= 13.0, "|Q| {}", out.qtable.max_abs());
        Ok(())
    });
    if let Err(e) = bound {
        ok = false;
        parts.push(format!("bound: {e}"));
    } else {
        parts.push(format!("|Q| <= {} on 32 random runs", h.q_bound()));
    }
    verdict(ok && (h.q_bound() - 13.0).abs() < 1e-9, parts.join("; "))
}

fn criterion_9() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (prop::collection::vec(-50.0f64..50.0, 1..64), any::<bool>());
    let result = runner.run(&strategy, |(v, sym)| {
        let mode = if sym { QuantMode::Symmetric } else { QuantMode::Asymmetric };
        let mut obs = MinMaxObserver::default();
        obs.observe(&v).unwrap();
        let qp = compute_qparams(&obs, mode).unwrap();
        let x = Tensor::from_vec(v.clone()).unwrap();
        let once = fake_quant(&x, &qp);
        let twice = fake_quant(&once, &qp);
        prop_assert_eq!(once.data(), twice.data());
        let (lo, hi) = qp.range();
        for (&orig, &q) in v.iter().zip(once.data()) {
            let k = q / qp.scale + qp.zero_point as f64;
            prop_assert!((k - k.round()).abs() < 1e-6);
            prop_assert!(k.round() >= qp.qmin() as f64 && k.round() <= qp.qmax() as f64);
            if (lo..=hi).contains(&orig) {
                prop_assert!((q - orig).abs() <= qp.scale / 2.0 + 1e-9 * qp.scale.max(1.0));
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => Outcome::Pass("idempotence, lattice, |x - q(x)| <= scale/2 on 10000 tensors".into()),
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn criterion_10() -> Outcome {
    let mut ok = true;
    let mut entries = 0;
    let mut parts = Vec::new();
    for c in common::grad::layer_cases() {
        match common::grad::check_layer(&c.layer, &c.input_shape, c.seed) {
            Ok(n) => entries += n,
            Err(e) => {
                ok = false;
                parts.push(format!("{}: {e}", c.name));
            }
        }
    }
    for (topo, batch, seed) in [(common::grad::mini_mlp(), 4, 21), (common::grad::mini_conv(), 3, 31)] {
        match common::grad::check_network(&topo, batch, seed) {
            Ok(n) => entries += n,
            Err(e) => {
                ok = false;
                parts.push(format!("{}: {e}", topo.name));
            }
        }
    }
    parts.insert(0, format!("{entries} gradient entries within rel {}", common::grad::REL));
    verdict(ok, parts.join("; "))
}

struct Mnist {
    ann_accuracy: f64,
    ann_seconds: f64,
    snn: VariantMetrics,
    qsnn: VariantMetrics,
    threshold: VariantMetrics,
    policy: VariantMetrics,
    policy_q_max: f64,
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run_mnist() -> Result<Mnist, String> {
    let root = workspace_root();
    let (mut cfg, _) = RunConfig::load(&root.join("configs/mlp.toml")).map_err(|e| e.to_string())?;
    cfg.data_dir = root.join(&cfg.data_dir);
    cfg.validate().map_err(|e| e.to_string())?;
    let err = |e: qdsnn::Error| e.to_string();

    let start = Instant::now();
    let train = load_split(&cfg, Split::Train).map_err(err)?;
    let test = eval_subset(&cfg, &load_split(&cfg, Split::Test).map_err(err)?);
    let (ann, _) = train_ann_stage(&cfg, &train, |m| eprintln!("[ann] epoch {} loss {:.4}", m.epoch, m.loss)).map_err(err)?;
    let ann_accuracy = eval_ann(&ann, &test).map_err(err)?.final_accuracy();
    let ann_seconds = start.elapsed().as_secs_f64();

    let consts = EnergyConstants::default();
    let enc = encode_config(&cfg);
    let snet = convert_stage(&cfg, &ann, &train).map_err(err)?;
    let snn = snn_metrics("snn", &snet, &test, &AlwaysContinue, &enc, &consts).map_err(err)?.metrics;
    eprintln!("[snn] accuracy {:.4}", snn.accuracy);

    let (qann, _) = qat_stage(&cfg, &ann, &train).map_err(err)?;
    let qsnet = convert_stage(&cfg, &qann, &train).map_err(err)?;
    let eval = |name: &str, rule: &dyn ExitRule| snn_metrics(name, &qsnet, &test, rule, &enc, &consts).map(|e| e.metrics);
    let qsnn = eval("qsnn", &AlwaysContinue).map_err(err)?;
    let threshold = eval("qdsnn-threshold", &cfg.thresholds).map_err(err)?;
    let trained = policy_stage(&cfg, &qsnet, &train).map_err(err)?;
    let policy = eval("qdsnn-policy", &trained.qtable).map_err(err)?;
    Ok(Mnist {
        ann_accuracy,
        ann_seconds,
        snn,
        qsnn,
        threshold,
        policy,
        policy_q_max: trained.qtable.max_abs(),
    })
}

fn mnist_criteria(m: &Mnist) -> Vec<(u32, Outcome)> {
    let base = &m.qsnn;
    let ratio = |v: &VariantMetrics| v.synaptic_ops / base.synaptic_ops;
    let thr_ratio = ratio(&m.threshold);
    let pol_ratio = ratio(&m.policy);
    let populated = m.threshold.exit_fractions.iter().filter(|&&f| f >= 0.05).count();
    vec![
        (
            4,
            verdict(
                m.ann_accuracy >= 0.975 && m.ann_seconds <= 1800.0,
                format!("ANN accuracy {:.4} >= 0.975, train+eval {:.0}s <= 1800s", m.ann_accuracy, m.ann_seconds),
            ),
        ),
        (5, verdict(m.snn.accuracy >= 0.93, format!("SNN T=32 accuracy {:.4} >= 0.93", m.snn.accuracy))),
        (6, verdict(base.accuracy >= 0.92, format!("QSNN T=4 accuracy {:.4} >= 0.92", base.accuracy))),
        (
            7,
            verdict(
                m.threshold.accuracy >= base.accuracy - 0.01
                    && thr_ratio <= 0.5
                    && m.policy.accuracy >= base.accuracy - 0.01
                    && pol_ratio < 1.0
                    && m.policy_q_max <= 13.0,
                format!(
                    "threshold acc {:.4} vs QSNN {:.4}, ops ratio {thr_ratio:.3} (<= 0.5); policy acc {:.4}, ops ratio {pol_ratio:.3} (< 1)",
                    m.threshold.accuracy, base.accuracy, m.policy.accuracy
                ),
            ),
        ),
        (
            11,
            verdict(
                populated >= 2,
                format!("{populated} exits with >= 5% of samples, fractions {:.3?}", m.threshold.exit_fractions),
            ),
        ),
    ]
}

fn main() {
    let strict = std::env::var("QDSNN_STRICT").is_ok_and(|v| v == "1");
    let skip_mnist = std::env::var("QDSNN_SKIP_MNIST").is_ok_and(|v| v == "1");

    let mut results: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (8, criterion_8()),
        (9, criterion_9()),
        (10, criterion_10()),
    ];
    if skip_mnist {
        for n in [4, 5, 6, 7, 11] {
            results.push((n, Outcome::Skip("QDSNN_SKIP_MNIST=1".into())));
        }
    } else {
        match run_mnist() {
            Ok(m) => results.extend(mnist_criteria(&m)),
            Err(e) => {
                for n in [4, 5, 6, 7, 11] {
                    results.push((n, Outcome::Fail(format!("pipeline error: {e}"))));
                }
            }
        }
    }
    results.sort_by_key(|r| r.0);

    let mut fatal = Vec::new();
    for (n, outcome) in &results {
        let (tag, detail, failed) = match outcome {
            Outcome::Pass(d) => ("PASS", d, false),
            Outcome::Fail(d) => ("FAIL", d, true),
            Outcome::Skip(d) => ("SKIP", d, strict),
        };
        println!("criterion {n}: {tag} {detail}");
        if failed && (strict || EXACT.contains(n)) {
            fatal.push(*n);
        }
    }
    if !fatal.is_empty() {
        eprintln!("fatal acceptance failures: {fatal:?}");
        std::process::exit(1);
    }
}

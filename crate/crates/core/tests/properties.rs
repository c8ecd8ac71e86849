use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qdsnn::exit::{confidence, ThresholdConfig, ExitRule};
use qdsnn::quant::{compute_qparams, fake_quant, MinMaxObserver, QuantMode};
use qdsnn::rl::{train_policy, ExitTable, RlHyper};
use qdsnn::snn::{encode_rate, lif_step, percentile_positive, ExitDecision, LifConfig, ResetMode};
use qdsnn::{conv2d_forward, linear_forward, softmax, Conv2d, Layer, Linear, Tensor};

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..64)
}

fn qparams_for(v: &[f64], mode: QuantMode) -> qdsnn::quant::QParams {
    let mut obs = MinMaxObserver::default();
    obs.observe(v).unwrap();
    compute_qparams(&obs, mode).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn quantizer_idempotent_on_lattice_and_bounded(v in values(), sym in any::<bool>()) {
        let mode = if sym { QuantMode::Symmetric } else { QuantMode::Asymmetric };
        let qp = qparams_for(&v, mode);
        let x = Tensor::from_vec(v.clone()).unwrap();
        let once = fake_quant(&x, &qp);
        let twice = fake_quant(&once, &qp);
        prop_assert_eq!(once.data(), twice.data());
        let (lo, hi) = qp.range();
        for (&orig, &q) in v.iter().zip(once.data()) {
            let k = q / qp.scale + qp.zero_point as f64;
            prop_assert!((k - k.round()).abs() < 1e-6, "{} not on the lattice", q);
            prop_assert!(k.round() >= qp.qmin() as f64 && k.round() <= qp.qmax() as f64);
            if orig >= lo && orig <= hi {
                prop_assert!((q - orig).abs() <= qp.scale / 2.0 + 1e-9 * qp.scale.max(1.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn symmetric_zero_maps_to_zero(v in values()) {
        let qp = qparams_for(&v, QuantMode::Symmetric);
        prop_assert_eq!(qp.fake(0.0), 0.0);
        prop_assert_eq!(qp.zero_point, 0);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-500.0f64..500.0, 1..32)) {
        let p = softmax(&v).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        let c = confidence(&v).unwrap();
        prop_assert!(c >= 1.0 / v.len() as f64 - 1e-12 && c <= 1.0);
    }

    #[test]
    fn full_window_conv_equals_linear(c in 1usize..4, k in 1usize..5, out in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv2d::new(c, out, k, 1, 0, &mut rng);
        let lin = Linear::from_parts(
            conv.weight.clone().reshape(&[out, c * k * k]).unwrap(),
            conv.bias.clone(),
        ).unwrap();
        let x: Vec<f64> = (0..c * k * k).map(|i| ((i as f64 + seed as f64 % 7.0) * 0.37).sin()).collect();
        let img = Tensor::new(vec![c, k, k], x.clone()).unwrap();
        let yc = conv2d_forward(&img, &Layer::Conv2d(conv)).unwrap();
        let yl = linear_forward(&Tensor::from_vec(x).unwrap(), &Layer::Linear(lin)).unwrap();
        prop_assert_eq!(yc.shape(), &[out, 1, 1]);
        for (a, b) in yc.data().iter().zip(yl.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_matches_direct_loops(
        c in 1usize..3, h in 3usize..8, w in 3usize..8, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv2d::new(c, 2, k, stride, pad, &mut rng);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.91 + 0.3).cos()).collect();
        let img = Tensor::new(vec![c, h, w], x.clone()).unwrap();
        let y = conv2d_forward(&img, &Layer::Conv2d(conv.clone())).unwrap();
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        prop_assert_eq!(y.shape(), &[2, oh, ow]);
        for o in 0..2 {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = conv.bias.data()[o];
                    for ci in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (r, s) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                    acc += conv.weight.data()[((o * c + ci) * k + di) * k + dj] * x[(ci * h + r as usize) * w + s as usize];
                                }
                            }
                        }
                    }
                    prop_assert!((y.data()[(o * oh + i) * ow + j] - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn lif_tracks_leaky_integral_and_bounds_spikes(
        currents in prop::collection::vec(0.0f64..1.5, 1..64),
        beta in 0.5f64..0.999,
    ) {
        let cfg = LifConfig { beta, reset: ResetMode::Subtract, init_fraction: 0.0, ..LifConfig::default() };
        // subtract reset: U_t equals the leaky integral minus the leaky sum of emitted spikes
        let (mut u, mut integral, mut spikes) = (vec![0.0], 0.0, 0u64);
        let mut spike_leak = 0.0;
        for &i in &currents {
            let (s, next) = lif_step(&cfg, &u, &[i]).unwrap();
            integral = beta * integral + i;
            spike_leak = beta * spike_leak + if s[0] { cfg.theta } else { 0.0 };
            spikes += s[0] as u64;
            u = next;
            prop_assert!((u[0] - (integral - spike_leak)).abs() < 1e-9);
            if currents.iter().all(|&c| c <= cfg.theta) {
                prop_assert!(u[0] < cfg.theta);
            }
        }
        prop_assert!(spikes <= currents.len() as u64);
    }

    #[test]
    fn higher_threshold_never_spikes_more(i in 0.0f64..2.0, t in 1usize..64, theta in 0.2f64..2.0, extra in 0.0f64..1.0) {
        let count = |th: f64| {
            let cfg = LifConfig { theta: th, init_fraction: 0.0, ..LifConfig::default() };
            let mut u = vec![0.0];
            let mut n = 0;
            for _ in 0..t {
                let (s, next) = lif_step(&cfg, &u, &[i]).unwrap();
                n += s[0] as usize;
                u = next;
            }
            n
        };
        prop_assert!(count(theta + extra) <= count(theta));
    }

    #[test]
    fn rate_code_is_deterministic_and_binary(px in prop::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
        let img = Tensor::from_vec(px).unwrap();
        let a = encode_rate(&img, 8, seed).unwrap();
        prop_assert_eq!(&a, &encode_rate(&img, 8, seed).unwrap());
        prop_assert!(a.data.iter().all(|&s| s <= 1));
    }

    #[test]
    fn percentile_lies_within_positive_range(v in prop::collection::vec(-5.0f64..5.0, 1..200), p in 1.0f64..=100.0) {
        match percentile_positive(&v, p) {
            None => prop_assert!(v.iter().all(|&x| x <= 0.0)),
            Some(q) => {
                let pos: Vec<f64> = v.iter().copied().filter(|&x| x > 0.0).collect();
                prop_assert!(pos.contains(&q));
                let below = pos.iter().filter(|&&x| x <= q).count() as f64;
                prop_assert!(below / pos.len() as f64 >= p / 100.0 - 1e-9);
            }
        }
    }

    #[test]
    fn raising_a_threshold_never_adds_early_exits(
        confs in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 2), 1..100),
        t0 in 0.0f64..=1.0, t1 in 0.0f64..=1.0, bump in 0.0f64..0.5,
    ) {
        let exits_by = |cfg: &ThresholdConfig, upto: usize| {
            confs.iter().filter(|c| {
                (0..=upto).any(|e| cfg.decide(e, c[e]) == ExitDecision::Exit)
            }).count()
        };
        let base = ThresholdConfig::new(vec![t0, t1]).unwrap();
        let raised0 = ThresholdConfig::new(vec![(t0 + bump).min(1.0), t1]).unwrap();
        let raised1 = ThresholdConfig::new(vec![t0, (t1 + bump).min(1.0)]).unwrap();
        prop_assert!(exits_by(&raised0, 0) <= exits_by(&base, 0));
        prop_assert!(exits_by(&raised1, 1) <= exits_by(&base, 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn q_values_stay_bounded(
        rows in prop::collection::vec((0.0f64..=1.0, any::<bool>(), 0.0f64..=1.0, any::<bool>()), 1..30),
        alpha in 0.0f64..2.0, gamma in 0.0f64..0.99, s0 in 0.0f64..=1.0, seed in any::<u64>(),
    ) {
        let env = ExitTable {
            confidence: rows.iter().map(|r| vec![r.0, r.2]).collect(),
            correct: rows.iter().map(|r| vec![r.1, r.3]).collect(),
        };
        let h = RlHyper { alpha, gamma, episodes: 2_000, seed, eta: 0.5, ..RlHyper::default() };
        let out = train_policy(&env, &[s0, 0.0], &h).unwrap();
        prop_assert!(out.qtable.max_abs() <= h.q_bound() + 1e-12);
    }
}

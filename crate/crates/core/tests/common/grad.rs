//! Central-difference gradient checks.

use qdsnn::ann::arch::{NetworkSpec, Topology, TopologyExit};
use qdsnn::ann::network::{BranchyNetwork, Targets};
use qdsnn::layer::LayerKind;
use qdsnn::{BatchNorm, Conv2d, Layer, Linear, Pool2d, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL: f64 = 1e-4;

pub type Check = Result<usize, String>;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    // keep inputs away from the ReLU kink and from pooling ties
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn close(analytic: f64, numeric: f64, what: &str) -> Result<(), String> {
    let err = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if err <= REL * scale + 1e-8 {
        Ok(())
    } else {
        Err(format!(
            "{what}: analytic {analytic} vs numeric {numeric} (rel {:.3e})",
            err / scale.max(1e-300)
        ))
    }
}

fn weighted_sum(layer: &Layer, x: &Tensor, r: &Tensor) -> f64 {
    let (y, _, _) = layer.vjp(x, r).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Checks input and parameter gradients of one layer; returns the entries compared.
pub fn check_layer(layer: &Layer, input_shape: &[usize], seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(input_shape, &mut rng);
    let mut out_shape = vec![input_shape[0]];
    out_shape.extend(layer.output_shape(&input_shape[1..]).map_err(|e| e.to_string())?);
    let r = random(&out_shape, &mut rng);
    let (_, dx, dparams) = layer.vjp(&x, &r).map_err(|e| e.to_string())?;
    let label = layer.label();
    let mut checked = 0;

    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let numeric = (weighted_sum(layer, &xp, &r) - weighted_sum(layer, &xm, &r)) / (2.0 * STEP);
        close(dx.data()[i], numeric, &format!("{label} dx[{i}]"))?;
        checked += 1;
    }
    for (p, grad) in dparams.iter().enumerate() {
        for i in 0..grad.len() {
            let perturbed = |delta: f64| {
                let mut l = layer.clone();
                l.params_mut()[p].data_mut()[i] += delta;
                weighted_sum(&l, &x, &r)
            };
            let numeric = (perturbed(STEP) - perturbed(-STEP)) / (2.0 * STEP);
            close(grad.data()[i], numeric, &format!("{label} param{p}[{i}]"))?;
            checked += 1;
        }
    }
    Ok(checked)
}

pub fn randomized_bn(features: usize, rng: &mut ChaCha8Rng) -> BatchNorm {
    let mut bn = BatchNorm::new(features);
    bn.gamma = random(&[features], rng);
    bn.beta = random(&[features], rng);
    bn
}

pub struct LayerCase {
    pub name: &'static str,
    pub layer: Layer,
    pub input_shape: Vec<usize>,
    pub seed: u64,
}

fn case(name: &'static str, layer: Layer, input_shape: &[usize], seed: u64) -> LayerCase {
    LayerCase {
        name,
        layer,
        input_shape: input_shape.to_vec(),
        seed,
    }
}

/// One configuration of every layer type.
pub fn layer_cases() -> Vec<LayerCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut linear = Linear::new(5, 4, &mut rng);
    linear.bias = random(&[4], &mut rng);
    let mut strided = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
    strided.bias = random(&[3], &mut rng);
    let plain = Conv2d::new(1, 2, 3, 1, 0, &mut rng);
    let pool = Pool2d { kernel: 2, stride: 2 };
    vec![
        case("linear", Layer::Linear(linear), &[3, 5], 2),
        case("conv2d-padded-strided", Layer::Conv2d(strided), &[2, 2, 5, 5], 4),
        case("conv2d-plain", Layer::Conv2d(plain), &[2, 1, 4, 4], 6),
        case("maxpool", Layer::MaxPool2d(pool), &[2, 2, 4, 4], 7),
        case("avgpool", Layer::AvgPool2d(pool), &[2, 2, 4, 4], 8),
        case("global-avgpool", Layer::GlobalAvgPool, &[2, 3, 3, 3], 9),
        case("batchnorm-1d", Layer::BatchNorm(randomized_bn(4, &mut rng)), &[5, 4], 11),
        case("batchnorm-2d", Layer::BatchNorm(randomized_bn(2, &mut rng)), &[3, 2, 2, 2], 12),
        case("relu", Layer::Relu, &[2, 7], 13),
        case("flatten", Layer::Flatten, &[2, 2, 2, 2], 14),
    ]
}

/// Checks the mixup loss gradient of a whole branchy network against finite differences.
pub fn check_network(topo: &Topology, batch: usize, seed: u64) -> Check {
    let spec = NetworkSpec::from_topology(topo, seed).map_err(|e| e.to_string())?;
    let mut net = BranchyNetwork::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for layer in net.spec.layers_mut() {
        if let Layer::BatchNorm(bn) = layer {
            *bn = randomized_bn(bn.features, &mut rng);
        }
    }
    let mut shape = vec![batch];
    shape.extend(&topo.input_shape);
    let x = random(&shape, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % topo.classes).collect();
    let partner: Vec<usize> = (0..batch).map(|i| (i + 1) % topo.classes).collect();
    let targets = Targets {
        labels: &labels,
        mixed_with: Some(&partner),
        lambda: 0.7,
    };
    let weights = vec![1.0; topo.exits.len() + 1];
    let (_, grads) = net.clone().loss_and_grads(&x, targets, &weights).map_err(|e| e.to_string())?;
    let mut checked = 0;

    let n_layers = net.spec.layers().count();
    for li in 0..n_layers {
        for (p, grad) in grads[li].iter().enumerate() {
            // every parameter of small tensors, a stride through large ones
            let stride = (grad.len() / 12).max(1);
            for i in (0..grad.len()).step_by(stride) {
                let loss_at = |delta: f64| {
                    let mut n = net.clone();
                    n.spec.layers_mut().nth(li).unwrap().params_mut()[p].data_mut()[i] += delta;
                    n.loss_and_grads(&x, targets, &weights).unwrap().0
                };
                let numeric = (loss_at(STEP) - loss_at(-STEP)) / (2.0 * STEP);
                close(grad.data()[i], numeric, &format!("layer {li} param {p}[{i}]"))?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}

pub fn mini_mlp() -> Topology {
    Topology {
        name: "mini-mlp".into(),
        input_shape: vec![1, 3, 3],
        classes: 4,
        backbone: vec![
            LayerKind::Flatten,
            LayerKind::linear(9, 6),
            LayerKind::Relu,
            LayerKind::linear(6, 5),
            LayerKind::Relu,
            LayerKind::linear(5, 4),
        ],
        exits: vec![TopologyExit {
            after: 2,
            head: vec![LayerKind::BatchNorm { features: 6 }, LayerKind::linear(6, 4)],
        }],
    }
}

pub fn mini_conv() -> Topology {
    Topology {
        name: "mini-conv".into(),
        input_shape: vec![1, 6, 6],
        classes: 3,
        backbone: vec![
            LayerKind::conv(1, 2, 3, 1, 0),
            LayerKind::Relu,
            LayerKind::AvgPool2d(Pool2d { kernel: 2, stride: 2 }),
            LayerKind::Flatten,
            LayerKind::linear(8, 3),
        ],
        exits: vec![TopologyExit {
            after: 1,
            head: vec![
                LayerKind::conv(2, 2, 3, 1, 1),
                LayerKind::Relu,
                LayerKind::GlobalAvgPool,
                LayerKind::BatchNorm { features: 2 },
                LayerKind::linear(2, 3),
            ],
        }],
    }
}

//! Branchy network descriptions: shape-only topologies and parameterised specs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{BatchNorm, Conv2d, Layer, LayerKind, Linear, Pool2d};

/// The built-in architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Lenet,
    Alexnet,
}

impl Architecture {
    pub fn topology(self) -> Topology {
        match self {
            Architecture::Mlp => mlp_topology(),
            Architecture::Lenet => lenet_topology(),
            Architecture::Alexnet => alexnet_topology(),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Architecture::Mlp),
            "lenet" => Ok(Architecture::Lenet),
            "alexnet" => Ok(Architecture::Alexnet),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyExit {
    /// Backbone layer whose output feeds the head.
    pub after: usize,
    pub head: Vec<LayerKind>,
}

/// Layer graph without parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub backbone: Vec<LayerKind>,
    pub exits: Vec<TopologyExit>,
}

/// Per-sample output shapes of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Shapes {
    pub backbone: Vec<Vec<usize>>,
    pub heads: Vec<Vec<Vec<usize>>>,
}

impl Shapes {
    /// Input shape of backbone layer `i`.
    pub fn backbone_input<'a>(&'a self, input: &'a [usize], i: usize) -> &'a [usize] {
        if i == 0 {
            input
        } else {
            &self.backbone[i - 1]
        }
    }

    /// Input shape of layer `i` of head `e`.
    pub fn head_input<'a>(&'a self, topo: &Topology, e: usize, i: usize) -> &'a [usize] {
        if i == 0 {
            &self.backbone[topo.exits[e].after]
        } else {
            &self.heads[e][i - 1]
        }
    }
}

impl Topology {
    /// Early exits plus the final classifier.
    pub fn exit_count(&self) -> usize {
        self.exits.len() + 1
    }

    pub fn validate(&self) -> Result<Shapes> {
        if self.backbone.is_empty() {
            return Err(Error::Config(format!("{}: empty backbone", self.name)));
        }
        let mut shapes = Vec::with_capacity(self.backbone.len());
        let mut cur = self.input_shape.clone();
        for layer in &self.backbone {
            cur = layer.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        if cur != [self.classes] {
            return Err(Error::Config(format!(
                "{}: final classifier emits {cur:?}, expected [{}]",
                self.name, self.classes
            )));
        }
        let mut last_after = None;
        let mut heads = Vec::with_capacity(self.exits.len());
        for (e, exit) in self.exits.iter().enumerate() {
            if exit.after + 1 >= self.backbone.len() {
                return Err(Error::Config(format!(
                    "{}: exit {e} attaches after layer {}, which is not an intermediate layer",
                    self.name, exit.after
                )));
            }
            if last_after.is_some_and(|prev| exit.after <= prev) {
                return Err(Error::Config(format!(
                    "{}: exit attachment points must be strictly increasing",
                    self.name
                )));
            }
            last_after = Some(exit.after);
            let mut cur = shapes[exit.after].clone();
            let mut hs = Vec::with_capacity(exit.head.len());
            for layer in &exit.head {
                cur = layer.output_shape(&cur)?;
                hs.push(cur.clone());
            }
            if cur != [self.classes] {
                return Err(Error::Config(format!(
                    "{}: exit {e} head emits {cur:?}, expected [{}]",
                    self.name, self.classes
                )));
            }
            heads.push(hs);
        }
        Ok(Shapes {
            backbone: shapes,
            heads,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitBranch {
    pub after: usize,
    pub head: Vec<Layer>,
}

/// Backbone layers, exit heads and all their parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub backbone: Vec<Layer>,
    pub exits: Vec<ExitBranch>,
}

impl NetworkSpec {
    /// Instantiates a topology with freshly initialised parameters.
    pub fn from_topology(topo: &Topology, seed: u64) -> Result<Self> {
        topo.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |kind: &LayerKind| -> Layer {
            match *kind {
                LayerKind::Flatten => Layer::Flatten,
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => Layer::Linear(Linear::new(in_features, out_features, &mut rng)),
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    stride,
                    padding,
                    ..
                } => Layer::Conv2d(Conv2d::new(in_channels, out_channels, kernel_h, stride, padding, &mut rng)),
                LayerKind::MaxPool2d(p) => Layer::MaxPool2d(p),
                LayerKind::AvgPool2d(p) => Layer::AvgPool2d(p),
                LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerKind::BatchNorm { features } => Layer::BatchNorm(BatchNorm::new(features)),
                LayerKind::Relu => Layer::Relu,
            }
        };
        let backbone = topo.backbone.iter().map(&mut make).collect();
        let exits = topo
            .exits
            .iter()
            .map(|e| ExitBranch {
                after: e.after,
                head: e.head.iter().map(&mut make).collect(),
            })
            .collect();
        Ok(NetworkSpec {
            name: topo.name.clone(),
            input_shape: topo.input_shape.clone(),
            classes: topo.classes,
            backbone,
            exits,
        })
    }

    pub fn topology(&self) -> Topology {
        Topology {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            backbone: self.backbone.iter().map(Layer::kind).collect(),
            exits: self
                .exits
                .iter()
                .map(|e| TopologyExit {
                    after: e.after,
                    head: e.head.iter().map(Layer::kind).collect(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<Shapes> {
        self.topology().validate()
    }

    pub fn exit_count(&self) -> usize {
        self.exits.len() + 1
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone.iter().flat_map(Layer::params).map(|t| t.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.backbone_param_count()
            + self
                .exits
                .iter()
                .flat_map(|e| e.head.iter().flat_map(Layer::params))
                .map(|t| t.len())
                .sum::<usize>()
    }

    /// All layers in parameter order: backbone first, then each head.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.backbone.iter().chain(self.exits.iter().flat_map(|e| e.head.iter()))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.backbone
            .iter_mut()
            .chain(self.exits.iter_mut().flat_map(|e| e.head.iter_mut()))
    }
}

const MLP_HIDDEN: [usize; 4] = [512, 256, 128, 64];

/// 784-512-256-128-64-10 with exits after hidden layers 2 and 3.
pub fn mlp_topology() -> Topology {
    mlp_topology_with_exits(&[2, 3])
}

/// MLP variant with early exits after the given (1-based) hidden layers.
pub fn mlp_topology_with_exits(hidden_exits: &[usize]) -> Topology {
    let mut backbone = vec![LayerKind::Flatten];
    let mut prev = 28 * 28;
    let mut after_hidden = Vec::new();
    for &h in &MLP_HIDDEN {
        backbone.push(LayerKind::linear(prev, h));
        backbone.push(LayerKind::Relu);
        after_hidden.push(backbone.len() - 1);
        prev = h;
    }
    backbone.push(LayerKind::linear(prev, 10));
    let exits = hidden_exits
        .iter()
        .map(|&k| {
            let width = MLP_HIDDEN[k - 1];
            TopologyExit {
                after: after_hidden[k - 1],
                head: vec![LayerKind::BatchNorm { features: width }, LayerKind::linear(width, 10)],
            }
        })
        .collect();
    Topology {
        name: "mlp".into(),
        input_shape: vec![1, 28, 28],
        classes: 10,
        backbone,
        exits,
    }
}

/// Convolutional exit head: 3x3 conv to 32 channels, pooling, batch-norm, classifier.
fn conv_head(channels: usize, classes: usize) -> Vec<LayerKind> {
    vec![
        LayerKind::conv(channels, 32, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::GlobalAvgPool,
        LayerKind::BatchNorm { features: 32 },
        LayerKind::linear(32, classes),
    ]
}

/// LeNet-5 on 28x28 inputs: conv(1→6,5x5)+pool, conv(6→16,5x5)+pool, fc 256-120-84-10,
/// with exits after each pooled conv stage.
pub fn lenet_topology() -> Topology {
    let pool = Pool2d { kernel: 2, stride: 2 };
    let backbone = vec![
        LayerKind::conv(1, 6, 5, 1, 0),
        LayerKind::Relu,
        LayerKind::AvgPool2d(pool),
        LayerKind::conv(6, 16, 5, 1, 0),
        LayerKind::Relu,
        LayerKind::AvgPool2d(pool),
        LayerKind::Flatten,
        LayerKind::linear(16 * 4 * 4, 120),
        LayerKind::Relu,
        LayerKind::linear(120, 84),
        LayerKind::Relu,
        LayerKind::linear(84, 10),
    ];
    Topology {
        name: "lenet".into(),
        input_shape: vec![1, 28, 28],
        classes: 10,
        exits: vec![
            TopologyExit {
                after: 2,
                head: conv_head(6, 10),
            },
            TopologyExit {
                after: 5,
                head: conv_head(16, 10),
            },
        ],
        backbone,
    }
}

/// AlexNet adapted to 32x32x3 inputs (five conv, three fully-connected), exits after
/// conv1 and conv3. Used for static operation counting only.
pub fn alexnet_topology() -> Topology {
    let pool = Pool2d { kernel: 2, stride: 2 };
    let backbone = vec![
        LayerKind::conv(3, 64, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::MaxPool2d(pool),
        LayerKind::conv(64, 192, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::MaxPool2d(pool),
        LayerKind::conv(192, 384, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::conv(384, 256, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::conv(256, 256, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::MaxPool2d(pool),
        LayerKind::Flatten,
        LayerKind::linear(256 * 4 * 4, 4096),
        LayerKind::Relu,
        LayerKind::linear(4096, 4096),
        LayerKind::Relu,
        LayerKind::linear(4096, 10),
    ];
    Topology {
        name: "alexnet".into(),
        input_shape: vec![3, 32, 32],
        classes: 10,
        exits: vec![
            TopologyExit {
                after: 1,
                head: conv_head(64, 10),
            },
            TopologyExit {
                after: 7,
                head: conv_head(384, 10),
            },
        ],
        backbone,
    }
}

pub fn build_mlp(seed: u64) -> NetworkSpec {
    NetworkSpec::from_topology(&mlp_topology(), seed).expect("built-in MLP topology is valid")
}

pub fn build_lenet(seed: u64) -> NetworkSpec {
    NetworkSpec::from_topology(&lenet_topology(), seed).expect("built-in LeNet topology is valid")
}

//! Layer definitions and their batched forward/backward kernels.
//!
//! Batched activations are tensors whose first extent is the batch size; the
//! remaining extents are the per-sample shape. Shape inference works on
//! per-sample shapes only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, Tensor, Window};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out_channels, in_channels, kernel_h, kernel_w)`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool2d {
    pub kernel: usize,
    pub stride: usize,
}

/// Per-channel batch normalization. For `(C, H, W)` inputs statistics are
/// taken over batch and spatial positions; for `(F)` inputs over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub features: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Flatten,
    Linear(Linear),
    Conv2d(Conv2d),
    MaxPool2d(Pool2d),
    AvgPool2d(Pool2d),
    GlobalAvgPool,
    BatchNorm(BatchNorm),
    /// ReLU in the ANN; becomes a LIF population after conversion.
    Relu,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_features as f64).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            in_features,
            out_features,
            weight: Tensor::new(vec![out_features, in_features], weight).expect("linear weight shape"),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[out_features, in_features] = weight.shape() else {
            return Err(Error::shape("linear", "2-d weight", format!("{:?}", weight.shape())));
        };
        if bias.shape() != [out_features] {
            return Err(Error::shape("linear", format!("bias [{out_features}]"), format!("{:?}", bias.shape())));
        }
        Ok(Linear {
            in_features,
            out_features,
            weight,
            bias,
        })
    }
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            weight: Tensor::new(vec![out_channels, in_channels, kernel, kernel], weight)
                .expect("conv weight shape"),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    fn window(&self, height: usize, width: usize) -> Window {
        Window {
            channels: self.in_channels,
            height,
            width,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Output spatial extents, or a configuration error when they are not positive.
    pub fn output_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let kind = LayerKind::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
        };
        let out = kind.output_shape(&[self.in_channels, height, width])?;
        Ok((out[1], out[2]))
    }
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            features,
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Eval-mode affine form: `y = scale·x + shift` per channel.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mut scale = Vec::with_capacity(self.features);
        let mut shift = Vec::with_capacity(self.features);
        for c in 0..self.features {
            let s = self.gamma.data()[c] / (self.running_var.data()[c] + self.eps).sqrt();
            scale.push(s);
            shift.push(self.beta.data()[c] - s * self.running_mean.data()[c]);
        }
        (scale, shift)
    }
}

/// Shape-only description of a layer: everything operation counting needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d(Pool2d),
    AvgPool2d(Pool2d),
    GlobalAvgPool,
    BatchNorm {
        features: usize,
    },
    Relu,
}

impl LayerKind {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerKind::Linear {
            in_features,
            out_features,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            LayerKind::Flatten => "flatten".into(),
            LayerKind::Linear {
                in_features,
                out_features,
            } => format!("linear({in_features}→{out_features})"),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => format!("conv2d({in_channels}→{out_channels}, {kernel_h}x{kernel_w}, s{stride}, p{padding})"),
            LayerKind::MaxPool2d(p) => format!("maxpool2d({}, s{})", p.kernel, p.stride),
            LayerKind::AvgPool2d(p) => format!("avgpool2d({}, s{})", p.kernel, p.stride),
            LayerKind::GlobalAvgPool => "global_avg_pool".into(),
            LayerKind::BatchNorm { features } => format!("batchnorm({features})"),
            LayerKind::Relu => "relu".into(),
        }
    }

    pub fn is_synaptic(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(Error::shape(self.label(), format!("[{in_features}]"), format!("{input:?}")));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let &[ch, h, w] = input else {
                    return Err(Error::shape(self.label(), "(C, H, W)", format!("{input:?}")));
                };
                if ch != in_channels {
                    return Err(Error::shape(self.label(), format!("{in_channels} channels"), ch));
                }
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if stride == 0 || ph < kernel_h || pw < kernel_w {
                    return Err(Error::Config(format!(
                        "{}: input {h}x{w} yields no output positions",
                        self.label()
                    )));
                }
                Ok(vec![out_channels, (ph - kernel_h) / stride + 1, (pw - kernel_w) / stride + 1])
            }
            LayerKind::MaxPool2d(p) | LayerKind::AvgPool2d(p) => {
                let &[ch, h, w] = input else {
                    return Err(Error::shape(self.label(), "(C, H, W)", format!("{input:?}")));
                };
                if p.kernel == 0 || p.stride == 0 || h < p.kernel || w < p.kernel {
                    return Err(Error::Config(format!("{}: input {h}x{w} too small", self.label())));
                }
                Ok(vec![ch, (h - p.kernel) / p.stride + 1, (w - p.kernel) / p.stride + 1])
            }
            LayerKind::GlobalAvgPool => {
                let &[ch, _, _] = input else {
                    return Err(Error::shape(self.label(), "(C, H, W)", format!("{input:?}")));
                };
                Ok(vec![ch])
            }
            LayerKind::BatchNorm { features } => {
                if input.first() != Some(&features) {
                    return Err(Error::shape(self.label(), format!("{features} channels"), format!("{input:?}")));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
        }
    }
}

/// Saved forward state needed by the backward pass.
#[derive(Debug)]
pub(crate) enum Cache {
    Shape(Vec<usize>),
    Input(Tensor),
    Cols { cols: Vec<f64>, in_shape: Vec<usize> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Mask(Vec<bool>),
}

/// Gradients for a layer's parameters, in [`Layer::params`] order.
pub(crate) type ParamGrads = Vec<Tensor>;

impl Layer {
    pub fn label(&self) -> String {
        self.kind().label()
    }

    /// True for layers that carry synapses (and hence neurons in the converted net).
    pub fn is_synaptic(&self) -> bool {
        matches!(self, Layer::Linear(_) | Layer::Conv2d(_))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => vec![],
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Linear(l) => Some(&l.weight),
            Layer::Conv2d(c) => Some(&c.weight),
            _ => None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.kind().output_shape(input)
    }

    /// Parameter-free description of this layer.
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Flatten => LayerKind::Flatten,
            Layer::Linear(l) => LayerKind::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
            },
            Layer::Conv2d(c) => LayerKind::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel_h: c.kernel_h,
                kernel_w: c.kernel_w,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::MaxPool2d(p) => LayerKind::MaxPool2d(*p),
            Layer::AvgPool2d(p) => LayerKind::AvgPool2d(*p),
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::BatchNorm(b) => LayerKind::BatchNorm { features: b.features },
            Layer::Relu => LayerKind::Relu,
        }
    }

    /// Inference-mode forward (batch-norm uses running statistics).
    pub fn infer(&self, x: &Tensor, weight: Option<&Tensor>) -> Result<Tensor> {
        self.forward_impl(x, false, weight, false).map(|f| f.output)
    }

    /// Training-mode output and vector-Jacobian products: returns `(y, dx, dparams)`
    /// for upstream gradient `dy`. Running statistics of `self` are left untouched.
    pub fn vjp(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
        let mut scratch = self.clone();
        let (y, cache) = scratch.forward_train(x, None)?;
        if dy.shape() != y.shape() {
            return Err(Error::shape(self.label(), format!("{:?}", y.shape()), format!("{:?}", dy.shape())));
        }
        let (dx, grads) = self.backward(&cache, dy, None)?;
        Ok((y, dx, grads))
    }

    /// Training-mode forward; updates batch-norm running statistics.
    pub(crate) fn forward_train(
        &mut self,
        x: &Tensor,
        weight: Option<&Tensor>,
    ) -> Result<(Tensor, Cache)> {
        let fwd = self.forward_impl(x, true, weight, true)?;
        if let (Layer::BatchNorm(bn), Some((mean, var))) = (&mut *self, fwd.batch_stats) {
            let m = bn.momentum;
            for c in 0..bn.features {
                let rm = &mut bn.running_mean.data_mut()[c];
                *rm = (1.0 - m) * *rm + m * mean[c];
                let rv = &mut bn.running_var.data_mut()[c];
                *rv = (1.0 - m) * *rv + m * var[c];
            }
        }
        Ok((fwd.output, fwd.cache.expect("training forward keeps a cache")))
    }

    fn forward_impl(
        &self,
        x: &Tensor,
        train: bool,
        weight: Option<&Tensor>,
        keep_cache: bool,
    ) -> Result<Forward> {
        let n = x.shape()[0];
        let sample = &x.shape()[1..];
        let out_sample = self.output_shape(sample)?;
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&out_sample);
        let mut fwd = Forward {
            output: Tensor::zeros(&out_shape),
            cache: None,
            batch_stats: None,
        };
        match self {
            Layer::Flatten => {
                fwd.output = x.clone().reshape(&out_shape)?;
                if keep_cache {
                    fwd.cache = Some(Cache::Shape(x.shape().to_vec()));
                }
            }
            Layer::Linear(l) => {
                let w = weight.unwrap_or(&l.weight);
                let out = fwd.output.data_mut();
                for row in out.chunks_mut(l.out_features) {
                    row.copy_from_slice(l.bias.data());
                }
                gemm(n, l.in_features, l.out_features, 1.0, x.data(), false, w.data(), true, 1.0, out);
                if keep_cache {
                    fwd.cache = Some(Cache::Input(x.clone()));
                }
            }
            Layer::Conv2d(c) => {
                let w = weight.unwrap_or(&c.weight);
                let win = c.window(sample[1], sample[2]);
                let plane = win.out_h() * win.out_w();
                let patch = win.patch_len();
                let in_len = sample.iter().product::<usize>();
                let out_len = c.out_channels * plane;
                let mut cols = vec![0.0; if keep_cache { n * patch * plane } else { patch * plane }];
                let out = fwd.output.data_mut();
                for s in 0..n {
                    let col = if keep_cache {
                        &mut cols[s * patch * plane..(s + 1) * patch * plane]
                    } else {
                        &mut cols[..]
                    };
                    im2col(&x.data()[s * in_len..(s + 1) * in_len], &win, col);
                    let dst = &mut out[s * out_len..(s + 1) * out_len];
                    for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                        chunk.fill(c.bias.data()[o]);
                    }
                    gemm(c.out_channels, patch, plane, 1.0, w.data(), false, col, false, 1.0, dst);
                }
                if keep_cache {
                    fwd.cache = Some(Cache::Cols {
                        cols,
                        in_shape: x.shape().to_vec(),
                    });
                }
            }
            Layer::MaxPool2d(p) => {
                let (ch, h, w) = (sample[0], sample[1], sample[2]);
                let (oh, ow) = (out_sample[1], out_sample[2]);
                let mut argmax = Vec::with_capacity(if keep_cache { fwd.output.len() } else { 0 });
                let xs = x.data();
                let out = fwd.output.data_mut();
                let mut k = 0;
                for s in 0..n {
                    for c in 0..ch {
                        let base = (s * ch + c) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = base + oy * p.stride * w + ox * p.stride;
                                for ky in 0..p.kernel {
                                    for kx in 0..p.kernel {
                                        let idx = base + (oy * p.stride + ky) * w + ox * p.stride + kx;
                                        if xs[idx] > xs[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                out[k] = xs[best];
                                if keep_cache {
                                    argmax.push(best);
                                }
                                k += 1;
                            }
                        }
                    }
                }
                if keep_cache {
                    fwd.cache = Some(Cache::MaxPool {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    });
                }
            }
            Layer::AvgPool2d(p) => {
                avg_pool(x.data(), n, sample, &out_sample, *p, fwd.output.data_mut());
                if keep_cache {
                    fwd.cache = Some(Cache::Shape(x.shape().to_vec()));
                }
            }
            Layer::GlobalAvgPool => {
                let plane = sample[1] * sample[2];
                for (dst, src) in fwd.output.data_mut().iter_mut().zip(x.data().chunks(plane)) {
                    *dst = src.iter().sum::<f64>() / plane as f64;
                }
                if keep_cache {
                    fwd.cache = Some(Cache::Shape(x.shape().to_vec()));
                }
            }
            Layer::BatchNorm(bn) => {
                let ch = bn.features;
                let plane: usize = sample[1..].iter().product();
                let count = (n * plane) as f64;
                let (mean, var) = if train {
                    let mut mean = vec![0.0; ch];
                    let mut var = vec![0.0; ch];
                    for s in 0..n {
                        for c in 0..ch {
                            let seg = &x.data()[(s * ch + c) * plane..(s * ch + c + 1) * plane];
                            mean[c] += seg.iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count);
                    for s in 0..n {
                        for c in 0..ch {
                            let seg = &x.data()[(s * ch + c) * plane..(s * ch + c + 1) * plane];
                            var[c] += seg.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= count);
                    (mean, var)
                } else {
                    (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
                let mut xhat = vec![0.0; if keep_cache { x.len() } else { 0 }];
                let out = fwd.output.data_mut();
                for s in 0..n {
                    for c in 0..ch {
                        let off = (s * ch + c) * plane;
                        for i in off..off + plane {
                            let h = (x.data()[i] - mean[c]) * inv_std[c];
                            if keep_cache {
                                xhat[i] = h;
                            }
                            out[i] = bn.gamma.data()[c] * h + bn.beta.data()[c];
                        }
                    }
                }
                if keep_cache {
                    fwd.cache = Some(Cache::BatchNorm { xhat, inv_std });
                }
                if train {
                    // running variance tracks the unbiased estimate
                    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    fwd.batch_stats = Some((mean, var.iter().map(|v| v * unbias).collect()));
                }
            }
            Layer::Relu => {
                let out = fwd.output.data_mut();
                for (o, &v) in out.iter_mut().zip(x.data()) {
                    *o = v.max(0.0);
                }
                if keep_cache {
                    fwd.cache = Some(Cache::Mask(x.data().iter().map(|&v| v > 0.0).collect()));
                }
            }
        }
        Ok(fwd)
    }

    /// Backward pass. `weight` must be the same override given to the forward.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        dy: &Tensor,
        weight: Option<&Tensor>,
    ) -> Result<(Tensor, ParamGrads)> {
        let n = dy.shape()[0];
        match (self, cache) {
            (Layer::Flatten, Cache::Shape(in_shape)) => Ok((dy.clone().reshape(in_shape)?, vec![])),
            (Layer::Linear(l), Cache::Input(x)) => {
                let w = weight.unwrap_or(&l.weight);
                let mut dx = Tensor::zeros(x.shape());
                gemm(n, l.out_features, l.in_features, 1.0, dy.data(), false, w.data(), false, 0.0, dx.data_mut());
                let mut dw = Tensor::zeros(l.weight.shape());
                gemm(l.out_features, n, l.in_features, 1.0, dy.data(), true, x.data(), false, 0.0, dw.data_mut());
                let mut db = Tensor::zeros(l.bias.shape());
                for row in dy.data().chunks(l.out_features) {
                    for (b, g) in db.data_mut().iter_mut().zip(row) {
                        *b += g;
                    }
                }
                Ok((dx, vec![dw, db]))
            }
            (Layer::Conv2d(c), Cache::Cols { cols, in_shape }) => {
                let w = weight.unwrap_or(&c.weight);
                let win = c.window(in_shape[2], in_shape[3]);
                let plane = win.out_h() * win.out_w();
                let patch = win.patch_len();
                let in_len: usize = in_shape[1..].iter().product();
                let out_len = c.out_channels * plane;
                let mut dx = Tensor::zeros(in_shape);
                let mut dw = Tensor::zeros(c.weight.shape());
                let mut db = Tensor::zeros(c.bias.shape());
                let mut dcols = vec![0.0; patch * plane];
                for s in 0..n {
                    let g = &dy.data()[s * out_len..(s + 1) * out_len];
                    let col = &cols[s * patch * plane..(s + 1) * patch * plane];
                    gemm(c.out_channels, plane, patch, 1.0, g, false, col, true, 1.0, dw.data_mut());
                    for (o, chunk) in g.chunks(plane).enumerate() {
                        db.data_mut()[o] += chunk.iter().sum::<f64>();
                    }
                    gemm(patch, c.out_channels, plane, 1.0, w.data(), true, g, false, 0.0, &mut dcols);
                    col2im(&dcols, &win, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
                }
                Ok((dx, vec![dw, db]))
            }
            (Layer::MaxPool2d(_), Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape);
                for (&idx, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[idx] += g;
                }
                Ok((dx, vec![]))
            }
            (Layer::AvgPool2d(p), Cache::Shape(in_shape)) => {
                let mut dx = Tensor::zeros(in_shape);
                let (ch, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
                let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
                let norm = 1.0 / (p.kernel * p.kernel) as f64;
                let g = dy.data();
                let d = dx.data_mut();
                for s in 0..n {
                    for c in 0..ch {
                        let base = (s * ch + c) * h * w;
                        let obase = (s * ch + c) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[obase + oy * ow + ox] * norm;
                                for ky in 0..p.kernel {
                                    for kx in 0..p.kernel {
                                        d[base + (oy * p.stride + ky) * w + ox * p.stride + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((dx, vec![]))
            }
            (Layer::GlobalAvgPool, Cache::Shape(in_shape)) => {
                let plane = in_shape[2] * in_shape[3];
                let mut dx = Tensor::zeros(in_shape);
                for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
                    chunk.fill(g / plane as f64);
                }
                Ok((dx, vec![]))
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std }) => {
                let ch = bn.features;
                let plane: usize = dy.shape()[2..].iter().product();
                let count = (n * plane) as f64;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for s in 0..n {
                    for c in 0..ch {
                        let off = (s * ch + c) * plane;
                        for i in off..off + plane {
                            dgamma[c] += dy.data()[i] * xhat[i];
                            dbeta[c] += dy.data()[i];
                        }
                    }
                }
                let mut dx = Tensor::zeros(dy.shape());
                for s in 0..n {
                    for c in 0..ch {
                        let g = bn.gamma.data()[c];
                        let off = (s * ch + c) * plane;
                        for i in off..off + plane {
                            dx.data_mut()[i] = g * inv_std[c] / count
                                * (count * dy.data()[i] - dbeta[c] - xhat[i] * dgamma[c]);
                        }
                    }
                }
                Ok((
                    dx,
                    vec![Tensor::new(vec![ch], dgamma)?, Tensor::new(vec![ch], dbeta)?],
                ))
            }
            (Layer::Relu, Cache::Mask(mask)) => {
                let mut dx = dy.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *d = 0.0;
                    }
                }
                Ok((dx, vec![]))
            }
            _ => Err(Error::Usage(format!("cache does not belong to {}", self.label()))),
        }
    }
}

struct Forward {
    output: Tensor,
    cache: Option<Cache>,
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) fn avg_pool(x: &[f64], n: usize, sample: &[usize], out_sample: &[usize], p: Pool2d, out: &mut [f64]) {
    let (ch, h, w) = (sample[0], sample[1], sample[2]);
    let (oh, ow) = (out_sample[1], out_sample[2]);
    let norm = 1.0 / (p.kernel * p.kernel) as f64;
    let mut k = 0;
    for s in 0..n {
        for c in 0..ch {
            let base = (s * ch + c) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..p.kernel {
                        let row = base + (oy * p.stride + ky) * w + ox * p.stride;
                        acc += x[row..row + p.kernel].iter().sum::<f64>();
                    }
                    out[k] = acc * norm;
                    k += 1;
                }
            }
        }
    }
}

/// Affine map `W·x + b` over the last dimension of `x` (a single vector or a batch).
pub fn linear_forward(x: &Tensor, layer: &Layer) -> Result<Tensor> {
    let Layer::Linear(l) = layer else {
        return Err(Error::Usage(format!("linear_forward called on {}", layer.label())));
    };
    match x.shape() {
        [f] if *f == l.in_features => {
            let batch = x.clone().reshape(&[1, *f])?;
            layer.infer(&batch, None)?.reshape(&[l.out_features])
        }
        [_, f] if *f == l.in_features => layer.infer(x, None),
        other => Err(Error::shape(layer.label(), format!("last dim {}", l.in_features), format!("{other:?}"))),
    }
}

/// 2-d convolution of a `(C, H, W)` image (or an `(N, C, H, W)` batch).
pub fn conv2d_forward(x: &Tensor, layer: &Layer) -> Result<Tensor> {
    let Layer::Conv2d(_) = layer else {
        return Err(Error::Usage(format!("conv2d_forward called on {}", layer.label())));
    };
    match x.shape() {
        [c, h, w] => {
            let batch = x.clone().reshape(&[1, *c, *h, *w])?;
            let out = layer.infer(&batch, None)?;
            let shape = out.shape()[1..].to_vec();
            out.reshape(&shape)
        }
        [_, _, _, _] => layer.infer(x, None),
        other => Err(Error::shape(layer.label(), "(C, H, W)", format!("{other:?}"))),
    }
}

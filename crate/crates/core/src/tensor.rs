//! Dense row-major tensors and the numeric kernels shared by every layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-d array of `f64`, stored row-major.
///
/// Invariant: every extent is at least 1 and `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", "positive extents", format!("{shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{numel} elements for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive: {shape:?}"
        );
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// 1-d tensor from a non-empty vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?}", self.shape), format!("{shape:?}")));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `c = alpha * a·b + beta * c` for row-major `a: m×k`, `b: k×n`, `c: m×n`,
/// with optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-d sliding window over a `(channels, height, width)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unrolled matrix: one per (channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }
}

/// Unrolls one `(C, H, W)` image into a `(C·Kh·Kw) × (Hout·Wout)` matrix.
pub(crate) fn im2col(input: &[f64], win: &Window, cols: &mut [f64]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let plane = oh * ow;
    debug_assert_eq!(cols.len(), win.patch_len() * plane);
    let pad = win.padding as isize;
    for c in 0..win.channels {
        let img = &input[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..win.kernel_h {
            for kx in 0..win.kernel_w {
                let row = (c * win.kernel_h + ky) * win.kernel_w + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride) as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= win.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride) as isize + kx as isize - pad;
                        *out = if ix < 0 || ix >= win.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds the unrolled matrix back into an image.
pub(crate) fn col2im(cols: &[f64], win: &Window, output: &mut [f64]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let plane = oh * ow;
    let pad = win.padding as isize;
    output.fill(0.0);
    for c in 0..win.channels {
        let img = &mut output[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..win.kernel_h {
            for kx in 0..win.kernel_w {
                let row = (c * win.kernel_h + ky) * win.kernel_w + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * win.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < win.width as isize {
                            img[iy as usize * win.width + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max-subtracted softmax. NaN inputs propagate as an error.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Usage("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("softmax input contains NaN".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Usage("argmax of an empty vector".into()));
    }
    Ok(argmax_unchecked(values))
}

pub(crate) fn argmax_unchecked(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

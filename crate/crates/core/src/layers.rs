//! Full-precision layer implementations.
//!
//! These are the reference paths every reduced-precision kernel is checked
//! against, and the "drop in" float path selectable at run time.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Matrix};

/// Negative-side slope of the leaky ReLU (Darknet's constant).
pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    LeakyRelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        activate(x, self)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "relu" => Ok(Self::Relu),
            "leaky" => Ok(Self::LeakyRelu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Relu => "relu",
            Self::LeakyRelu => "leaky",
        })
    }
}

#[inline]
pub fn activate(x: f32, kind: Activation) -> f32 {
    match kind {
        Activation::Linear => x,
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                LEAKY_SLOPE * x
            }
        }
    }
}

/// Hyperparameters of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            out_channels,
            activation: Activation::Linear,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Output `(H_out, W_out)` for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_output_dims(h, w, self.kernel, self.stride, self.pad)
    }
}

pub fn conv_output_dims(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Geometry(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    let span_h = h + 2 * pad;
    let span_w = w + 2 * pad;
    if span_h < kernel || span_w < kernel {
        return Err(Error::Geometry(format!(
            "kernel {kernel} does not fit {h}x{w} input with pad {pad}"
        )));
    }
    Ok(((span_h - kernel) / stride + 1, (span_w - kernel) / stride + 1))
}

/// Convolution parameters in `(out_channel, in_channel, ky, kx)` order plus
/// one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl WeightSet {
    pub fn new(weights: Vec<f32>, bias: Vec<f32>) -> Self {
        Self { weights, bias }
    }

    /// Weights with a zero bias.
    pub fn without_bias(weights: Vec<f32>, out_channels: usize) -> Self {
        Self {
            weights,
            bias: vec![0.0; out_channels],
        }
    }

    fn check(&self, in_channels: usize, spec: &ConvSpec) -> Result<()> {
        let expected = spec.out_channels * in_channels * spec.kernel * spec.kernel;
        if self.weights.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} weights for {}x{in_channels}x{k}x{k}, got {}",
                spec.out_channels,
                self.weights.len(),
                k = spec.kernel
            )));
        }
        if self.bias.len() != spec.out_channels {
            return Err(Error::Config(format!(
                "expected {} biases, got {}",
                spec.out_channels,
                self.bias.len()
            )));
        }
        Ok(())
    }
}

/// Lowers `fm` to a `(K*K*C) x (H_out*W_out)` matrix. Rows run over
/// `(in_channel, ky, kx)`, columns over output positions; padding reads 0.
pub fn im2col(fm: &FeatureMap, kernel: usize, stride: usize, pad: usize) -> Result<Matrix> {
    let (c, h, w) = fm.dims();
    let (ho, wo) = conv_output_dims(h, w, kernel, stride, pad)?;
    let n = ho * wo;
    let mut out = Matrix::zeros(kernel * kernel * c, n);
    let data = fm.data();
    let cols = out.data_mut();
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = data[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Plain triple-loop matrix product.
pub fn gemm_ref(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Geometry(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a.get(i, p) * b.get(p, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Direct convolution: per output element, the `K*K*C` dot product plus
/// bias, then the activation.
pub fn conv_forward_ref(fm: &FeatureMap, w: &WeightSet, spec: &ConvSpec) -> Result<FeatureMap> {
    let (c, h, wd) = fm.dims();
    w.check(c, spec)?;
    let (ho, wo) = spec.output_dims(h, wd)?;
    let k = spec.kernel;
    let data = fm.data();
    let mut out = vec![0.0f32; spec.out_channels * ho * wo];
    for o in 0..spec.out_channels {
        let filter = &w.weights[o * c * k * k..(o + 1) * c * k * k];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += filter[(ch * k + ky) * k + kx]
                                * data[(ch * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = activate(acc + w.bias[o], spec.activation);
            }
        }
    }
    FeatureMap::from_vec(spec.out_channels, ho, wo, out)
}

/// The same convolution lowered through `im2col` and `gemm_ref`, the way
/// Darknet's generic CPU path computes it.
pub fn conv_forward_im2col(
    fm: &FeatureMap,
    w: &WeightSet,
    spec: &ConvSpec,
) -> Result<FeatureMap> {
    let (c, h, wd) = fm.dims();
    w.check(c, spec)?;
    let (ho, wo) = spec.output_dims(h, wd)?;
    let k = spec.kernel;
    let rows = Matrix::from_vec(spec.out_channels, c * k * k, w.weights.clone())?;
    let cols = im2col(fm, k, spec.stride, spec.pad)?;
    let mut out = gemm_ref(&rows, &cols)?.into_vec();
    for (o, plane) in out.chunks_mut(ho * wo).enumerate() {
        for v in plane {
            *v = activate(*v + w.bias[o], spec.activation);
        }
    }
    FeatureMap::from_vec(spec.out_channels, ho, wo, out)
}

/// Output extent of a Darknet max-pool along one axis. Darknet pads by
/// `size - 1` in total, so `size == stride` yields `ceil(n / stride)` and a
/// stride-1 pool keeps the input extent.
pub fn pool_output_dim(n: usize, size: usize, stride: usize) -> usize {
    (n + size - 1 - size) / stride + 1
}

/// Window maximum over a channel-major buffer; windows are clipped at the
/// border rather than padded.
pub(crate) fn pool_max<T: Copy + PartialOrd>(
    data: &[T],
    (c, h, w): (usize, usize, usize),
    size: usize,
    stride: usize,
) -> (Vec<T>, usize, usize) {
    let ho = pool_output_dim(h, size, stride);
    let wo = pool_output_dim(w, size, stride);
    let offset = (size - 1) / 2;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let y0 = (oy * stride).saturating_sub(offset);
            let y1 = (oy * stride + size - offset).min(h);
            for ox in 0..wo {
                let x0 = (ox * stride).saturating_sub(offset);
                let x1 = (ox * stride + size - offset).min(w);
                let mut best = plane[y0 * w + x0];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = plane[y * w + x];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    (out, ho, wo)
}

pub fn maxpool_forward(fm: &FeatureMap, size: usize, stride: usize) -> Result<FeatureMap> {
    if size == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "maxpool size {size} and stride {stride} must be positive"
        )));
    }
    let (out, ho, wo) = pool_max(fm.data(), fm.dims(), size, stride);
    FeatureMap::from_vec(fm.channels(), ho, wo, out)
}

use crate::error::{Error, Result};
use crate::layers::ConvSpec;

use super::quant::{code_range, rshift_round, AccumulatorWidth, Accumulators, QuantSpec, QuantTensor};

/// Slice widths the fused kernel accepts.
pub const SUPPORTED_LANES: [usize; 4] = [1, 4, 8, 16];

/// Integer convolution weights in `(out_channel, in_channel, ky, kx)` order.
/// `bias` is in accumulator units and may be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub bits: u8,
    pub codes: Vec<i32>,
    pub bias: Vec<i32>,
}

impl QuantWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        bits: u8,
        codes: Vec<i32>,
    ) -> Result<Self> {
        if codes.len() != out_channels * in_channels * kernel * kernel {
            return Err(Error::Config(format!(
                "{} weight codes for {out_channels}x{in_channels}x{kernel}x{kernel}",
                codes.len()
            )));
        }
        let (lo, hi) = code_range(bits, true);
        if codes.iter().any(|q| *q < lo || *q > hi) {
            return Err(Error::Config(format!("weight code exceeds {bits} signed bits")));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            bits,
            codes,
            bias: Vec::new(),
        })
    }

    pub fn with_bias(mut self, bias: Vec<i32>) -> Result<Self> {
        if bias.len() != self.out_channels {
            return Err(Error::Config(format!(
                "expected {} bias values, got {}",
                self.out_channels,
                bias.len()
            )));
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn reduction_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Symmetric per-tensor quantization of float weights (zero point 0).
/// Returns the codes and the scale they were taken at.
pub fn quantize_weights_symmetric(weights: &[f32], bits: u8) -> (Vec<i32>, f32) {
    let max_code = ((1i32 << (bits - 1)) - 1).max(1);
    let peak = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    let scale = if peak > 0.0 { peak / max_code as f32 } else { 1.0 };
    let codes = weights
        .iter()
        .map(|w| ((w / scale).round() as i32).clamp(-max_code, max_code))
        .collect();
    (codes, scale)
}

/// Convolution over integer codes, lowered slice by slice.
///
/// The im2col multiplicand is materialised only `lanes` columns at a time
/// into one reusable buffer; each slice then yields `lanes` results per
/// output channel from lane-parallel dot products. With a 32-bit
/// accumulator the result is the exact dot product. With a 16-bit one every
/// product goes through [`rshift_round`] by `qs.pre_shift` and is added with
/// saturation.
///
/// Input codes are taken relative to their zero point; padding contributes
/// zero.
pub fn fused_conv_lowp(
    input: &QuantTensor,
    weights: &QuantWeights,
    spec: &ConvSpec,
    qs: &QuantSpec,
    lanes: usize,
) -> Result<Accumulators> {
    if !SUPPORTED_LANES.contains(&lanes) {
        return Err(Error::Config(format!(
            "unsupported lane count {lanes}; expected one of {SUPPORTED_LANES:?}"
        )));
    }
    qs.validate()?;
    let (c, h, w) = input.dims();
    if weights.in_channels != c
        || weights.kernel != spec.kernel
        || weights.out_channels != spec.out_channels
    {
        return Err(Error::Config(format!(
            "weights {}x{}x{k}x{k} do not match input channels {c} and conv {}x{}",
            weights.out_channels,
            weights.in_channels,
            spec.out_channels,
            spec.kernel,
            k = weights.kernel
        )));
    }
    let reduction = weights.reduction_len();
    qs.check_reduction(reduction)?;
    let (ho, wo) = spec.output_dims(h, w)?;
    let n = ho * wo;
    let k = spec.kernel;
    let zp = input.spec().zero_point;
    let codes = input.codes();

    // Per multiplicand row: (channel, ky, kx).
    let row_src: Vec<(usize, usize, usize)> = (0..c)
        .flat_map(|ch| (0..k).flat_map(move |ky| (0..k).map(move |kx| (ch, ky, kx))))
        .collect();

    let mut slice = vec![0i32; reduction * lanes];
    let mut out = vec![0i32; spec.out_channels * n];

    for j0 in (0..n).step_by(lanes) {
        let width = lanes.min(n - j0);
        for (r, &(ch, ky, kx)) in row_src.iter().enumerate() {
            let dst = &mut slice[r * lanes..r * lanes + width];
            for (lane, d) in dst.iter_mut().enumerate() {
                let j = j0 + lane;
                let iy = ((j / wo) * spec.stride + ky) as isize - spec.pad as isize;
                let ix = ((j % wo) * spec.stride + kx) as isize - spec.pad as isize;
                *d = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    codes[(ch * h + iy as usize) * w + ix as usize] - zp
                } else {
                    0
                };
            }
        }

        for o in 0..spec.out_channels {
            let filter = &weights.codes[o * reduction..(o + 1) * reduction];
            let bias = weights.bias.get(o).copied().unwrap_or(0);
            let dst = &mut out[o * n + j0..o * n + j0 + width];
            match qs.accumulator {
                AccumulatorWidth::Bits32 => {
                    let mut acc = [bias; 16];
                    for (r, &wv) in filter.iter().enumerate() {
                        let src = &slice[r * lanes..r * lanes + width];
                        for (a, x) in acc.iter_mut().zip(src) {
                            *a = a.wrapping_add(wv * x);
                        }
                    }
                    dst.copy_from_slice(&acc[..width]);
                }
                AccumulatorWidth::Bits16 => {
                    let mut acc = [saturate16(bias); 16];
                    for (r, &wv) in filter.iter().enumerate() {
                        let src = &slice[r * lanes..r * lanes + width];
                        for (a, x) in acc.iter_mut().zip(src) {
                            let p = saturate16(rshift_round(wv * x, qs.pre_shift));
                            *a = a.saturating_add(p);
                        }
                    }
                    for (d, a) in dst.iter_mut().zip(&acc[..width]) {
                        *d = *a as i32;
                    }
                }
            }
        }
    }

    Ok(Accumulators {
        channels: spec.out_channels,
        height: ho,
        width: wo,
        data: out,
    })
}

#[inline]
fn saturate16(v: i32) -> i16 {
    v.clamp(i16::MIN as i32, i16::MAX as i32) as i16
}

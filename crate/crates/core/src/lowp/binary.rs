//! Software twin of the binary-weight / few-bit-activation accelerator.
//!
//! Weights are single bits (1 for +1, 0 for -1). Unsigned activation codes
//! are split into bit planes so every dot product reduces to popcounts:
//! `acc = sum_b 2^b * (2 * popcount(plane_b & w) - popcount(plane_b))`.

use crate::error::{Error, Result};
use crate::layers::{pool_max, ConvSpec};

use super::quant::{threshold_activate, Accumulators, QuantTensor, ThresholdSet};

/// Packed binary filters, 8 weights per byte (least significant bit first)
/// in `(out_channel, in_channel, ky, kx)` order. Each filter row starts on a
/// byte boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryWeightSet {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    bytes: Vec<u8>,
}

impl BinaryWeightSet {
    pub fn row_bytes_for(in_channels: usize, kernel: usize) -> usize {
        (in_channels * kernel * kernel).div_ceil(8)
    }

    pub fn from_bytes(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        bytes: Vec<u8>,
    ) -> Result<Self> {
        let expected = out_channels * Self::row_bytes_for(in_channels, kernel);
        if bytes.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} packed weight bytes, got {}",
                bytes.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            bytes,
        })
    }

    /// Packs `+1` / `-1` weights. Any positive value maps to `+1`.
    pub fn from_signs(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        signs: &[i8],
    ) -> Result<Self> {
        let row = in_channels * kernel * kernel;
        if signs.len() != out_channels * row {
            return Err(Error::Config(format!(
                "expected {} binary weights, got {}",
                out_channels * row,
                signs.len()
            )));
        }
        let row_bytes = Self::row_bytes_for(in_channels, kernel);
        let mut bytes = vec![0u8; out_channels * row_bytes];
        for o in 0..out_channels {
            for i in 0..row {
                if signs[o * row + i] > 0 {
                    bytes[o * row_bytes + i / 8] |= 1 << (i % 8);
                }
            }
        }
        Self::from_bytes(out_channels, in_channels, kernel, bytes)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn row_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn sign(&self, o: usize, i: usize) -> i32 {
        let byte = self.bytes[o * Self::row_bytes_for(self.in_channels, self.kernel) + i / 8];
        if byte >> (i % 8) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Unpacked weights as `+1` / `-1`.
    pub fn to_signs(&self) -> Vec<i8> {
        let row = self.row_len();
        (0..self.out_channels)
            .flat_map(|o| (0..row).map(move |i| (o, i)))
            .map(|(o, i)| self.sign(o, i) as i8)
            .collect()
    }

    fn row_words(&self, o: usize) -> Vec<u64> {
        let row = self.row_len();
        let mut words = vec![0u64; row.div_ceil(64)];
        for i in 0..row {
            if self.sign(o, i) > 0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }
}

/// Raw accumulators of a binary-weight convolution over unsigned codes.
pub fn binary_conv_acc(
    input: &QuantTensor,
    weights: &BinaryWeightSet,
    spec: &ConvSpec,
) -> Result<Accumulators> {
    let (c, h, w) = input.dims();
    if input.spec().signed {
        return Err(Error::Config(
            "binary convolution expects unsigned activation codes".into(),
        ));
    }
    if weights.in_channels != c
        || weights.kernel != spec.kernel
        || weights.out_channels != spec.out_channels
    {
        return Err(Error::Config(format!(
            "binary weights {}x{}x{k}x{k} do not match input {c} channels and conv {}x{}",
            weights.out_channels,
            weights.in_channels,
            spec.out_channels,
            spec.kernel,
            k = weights.kernel
        )));
    }
    let (ho, wo) = spec.output_dims(h, w)?;
    let k = spec.kernel;
    let row = weights.row_len();
    let nwords = row.div_ceil(64);
    let planes = input.spec().activation_bits as usize;
    let codes = input.codes();
    let filters: Vec<Vec<u64>> = (0..spec.out_channels).map(|o| weights.row_words(o)).collect();

    let mut bitplanes = vec![0u64; planes * nwords];
    let mut out = vec![0i32; spec.out_channels * ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            bitplanes.iter_mut().for_each(|b| *b = 0);
            let mut i = 0;
            for ch in 0..c {
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let q = codes[(ch * h + iy as usize) * w + ix as usize] as u32;
                            for b in 0..planes {
                                if q >> b & 1 == 1 {
                                    bitplanes[b * nwords + i / 64] |= 1 << (i % 64);
                                }
                            }
                        }
                        i += 1;
                    }
                }
            }
            for (o, filter) in filters.iter().enumerate() {
                let mut acc = 0i32;
                for b in 0..planes {
                    let plane = &bitplanes[b * nwords..(b + 1) * nwords];
                    let (mut agree, mut total) = (0u32, 0u32);
                    for (p, f) in plane.iter().zip(filter) {
                        agree += (p & f).count_ones();
                        total += p.count_ones();
                    }
                    acc += (2 * agree as i32 - total as i32) << b;
                }
                out[(o * ho + oy) * wo + ox] = acc;
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

/// Binary convolution followed by per-channel threshold activation.
pub fn binary_conv(
    input: &QuantTensor,
    weights: &BinaryWeightSet,
    spec: &ConvSpec,
    thresholds: &ThresholdSet,
) -> Result<QuantTensor> {
    if thresholds.channels() != spec.out_channels {
        return Err(Error::Config(format!(
            "{} threshold channels for {} output channels",
            thresholds.channels(),
            spec.out_channels
        )));
    }
    let acc = binary_conv_acc(input, weights, spec)?;
    let plane = acc.height * acc.width;
    let codes = acc
        .data
        .iter()
        .enumerate()
        .map(|(i, a)| threshold_activate(*a, thresholds.channel(i / plane)))
        .collect();
    let mut out_spec = *input.spec();
    out_spec.activation_bits = thresholds.bits();
    QuantTensor::new(acc.dims(), codes, out_spec)
}

/// Max-pool directly on codes (monotone, so it commutes with dequantization).
pub fn maxpool_codes(input: &QuantTensor, size: usize, stride: usize) -> Result<QuantTensor> {
    if size == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "maxpool size {size} and stride {stride} must be positive"
        )));
    }
    let (c, _, _) = input.dims();
    let (out, ho, wo) = pool_max(input.codes(), input.dims(), size, stride);
    QuantTensor::new((c, ho, wo), out, *input.spec())
}

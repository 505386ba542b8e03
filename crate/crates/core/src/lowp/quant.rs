use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AccumulatorWidth {
    Bits16,
    #[default]
    Bits32,
}

impl AccumulatorWidth {
    pub fn bits(self) -> u32 {
        match self {
            Self::Bits16 => 16,
            Self::Bits32 => 32,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(Self::Bits16),
            32 => Ok(Self::Bits32),
            other => Err(Error::Config(format!(
                "accumulator width must be 16 or 32, got {other}"
            ))),
        }
    }
}

impl fmt::Display for AccumulatorWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Inclusive code bounds for a `bits`-wide integer.
pub fn code_range(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1)
    } else {
        (0, (1i32 << bits) - 1)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Config(format!("bit width must be in 1..=8, got {bits}")));
    }
    Ok(())
}

/// Quantization contract of one tensor or layer.
///
/// A code `q` stands for the real value `scale * (q - zero_point)`.
/// `pre_shift` is the rounding right shift applied to every product before
/// it enters a 16-bit accumulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub activation_bits: u8,
    pub weight_bits: u8,
    pub scale: f32,
    pub zero_point: i32,
    pub accumulator: AccumulatorWidth,
    pub pre_shift: u32,
    pub signed: bool,
}

impl QuantSpec {
    /// Signed 8-bit activations and weights with a 32-bit accumulator.
    pub fn eight_bit(scale: f32) -> Self {
        Self {
            activation_bits: 8,
            weight_bits: 8,
            scale,
            zero_point: 0,
            accumulator: AccumulatorWidth::Bits32,
            pre_shift: 0,
            signed: true,
        }
    }

    /// Unsigned activation codes of the binary-weight engine.
    pub fn unsigned_codes(bits: u8, scale: f32) -> Self {
        Self {
            activation_bits: bits,
            weight_bits: 1,
            scale,
            zero_point: 0,
            accumulator: AccumulatorWidth::Bits32,
            pre_shift: 0,
            signed: false,
        }
    }

    pub fn with_accumulator(mut self, accumulator: AccumulatorWidth, pre_shift: u32) -> Self {
        self.accumulator = accumulator;
        self.pre_shift = pre_shift;
        self
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.activation_bits, self.signed)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.activation_bits)?;
        check_bits(self.weight_bits)?;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.accumulator == AccumulatorWidth::Bits32 && self.pre_shift != 0 {
            return Err(Error::Config(
                "pre_shift only applies to 16-bit accumulation".into(),
            ));
        }
        if self.pre_shift > 30 {
            return Err(Error::Config(format!("pre_shift {} too large", self.pre_shift)));
        }
        Ok(())
    }

    /// Rejects an unshifted 16-bit accumulation whose worst case over a
    /// reduction of `len` products leaves the signed 16-bit range.
    pub fn check_reduction(&self, len: usize) -> Result<()> {
        if self.accumulator != AccumulatorWidth::Bits16 || self.pre_shift > 0 {
            return Ok(());
        }
        let act = 1i64 << (self.activation_bits - if self.signed { 1 } else { 0 });
        let wgt = 1i64 << (self.weight_bits - 1);
        let worst = len as i64 * act * wgt;
        if worst > i16::MAX as i64 {
            return Err(Error::Config(format!(
                "16-bit accumulation of {len} products needs a pre-shift (worst case {worst})"
            )));
        }
        Ok(())
    }
}

/// Integer-coded feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    channels: usize,
    height: usize,
    width: usize,
    codes: Vec<i32>,
    spec: QuantSpec,
}

impl QuantTensor {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        codes: Vec<i32>,
        spec: QuantSpec,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidDimension(format!(
                "quantized tensor dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if codes.len() != channels * height * width {
            return Err(Error::InvalidDimension(format!(
                "{} codes for {channels}x{height}x{width}",
                codes.len()
            )));
        }
        check_bits(spec.activation_bits)?;
        let (lo, hi) = spec.code_range();
        if let Some(bad) = codes.iter().find(|q| **q < lo || **q > hi) {
            return Err(Error::Config(format!(
                "code {bad} does not fit {} {} bits",
                if spec.signed { "signed" } else { "unsigned" },
                spec.activation_bits
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            codes,
            spec,
        })
    }

    /// Reads integer-valued codes back out of a feature map, as handed over
    /// by a pre-processing stage.
    pub fn from_code_map(fm: &FeatureMap, spec: QuantSpec) -> Result<Self> {
        let mut codes = Vec::with_capacity(fm.len());
        for v in fm.data() {
            if v.fract() != 0.0 {
                return Err(Error::Contract(format!("expected integer codes, found {v}")));
            }
            codes.push(*v as i32);
        }
        Self::new(fm.dims(), codes, spec)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn into_codes(self) -> Vec<i32> {
        self.codes
    }

    /// The raw codes as a feature map (exact for all supported widths).
    pub fn to_code_map(&self) -> FeatureMap {
        FeatureMap::from_vec(
            self.channels,
            self.height,
            self.width,
            self.codes.iter().map(|q| *q as f32).collect(),
        )
        .expect("dims validated at construction")
    }

    pub fn dequantize(&self) -> FeatureMap {
        let s = self.spec.scale;
        let zp = self.spec.zero_point;
        FeatureMap::from_vec(
            self.channels,
            self.height,
            self.width,
            self.codes.iter().map(|q| s * (q - zp) as f32).collect(),
        )
        .expect("dims validated at construction")
    }
}

/// Saturating linear quantization with round-half-away-from-zero.
pub fn quantize_linear(fm: &FeatureMap, bits: u8, scale: f32, zero_point: i32) -> Result<QuantTensor> {
    let spec = QuantSpec {
        activation_bits: bits,
        zero_point,
        ..QuantSpec::eight_bit(scale)
    };
    spec.validate()?;
    let (lo, hi) = spec.code_range();
    let codes = fm
        .data()
        .iter()
        .map(|v| {
            let q = (v / scale).round() as i64 + zero_point as i64;
            q.clamp(lo as i64, hi as i64) as i32
        })
        .collect();
    QuantTensor::new(fm.dims(), codes, spec)
}

/// Unsigned variant producing codes in `[0, 2^bits - 1]`.
pub fn quantize_unsigned(fm: &FeatureMap, bits: u8, scale: f32) -> Result<QuantTensor> {
    let spec = QuantSpec::unsigned_codes(bits, scale);
    spec.validate()?;
    let (lo, hi) = spec.code_range();
    let codes = fm
        .data()
        .iter()
        .map(|v| ((v / scale).round() as i64).clamp(lo as i64, hi as i64) as i32)
        .collect();
    QuantTensor::new(fm.dims(), codes, spec)
}

/// Rounding arithmetic right shift: `(x + 2^(n-1)) >> n`, identity for
/// `n == 0`. Ties round toward positive infinity.
#[inline]
pub fn rshift_round(x: i32, n: u32) -> i32 {
    if n == 0 {
        return x;
    }
    ((x as i64 + (1i64 << (n - 1))) >> n) as i32
}

/// Number of thresholds not exceeding `acc`.
#[inline]
pub fn threshold_activate(acc: i32, thresholds: &[i32]) -> i32 {
    thresholds.partition_point(|t| *t <= acc) as i32
}

/// Per-output-channel ascending thresholds, `2^bits - 1` per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdSet {
    bits: u8,
    channels: usize,
    values: Vec<i32>,
}

impl ThresholdSet {
    pub fn new(bits: u8, channels: usize, values: Vec<i32>) -> Result<Self> {
        check_bits(bits)?;
        let per = (1usize << bits) - 1;
        if values.len() != channels * per {
            return Err(Error::Config(format!(
                "expected {} thresholds ({channels} channels x {per}), got {}",
                channels * per,
                values.len()
            )));
        }
        for (o, row) in values.chunks(per).enumerate() {
            if row.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Config(format!(
                    "thresholds of channel {o} are not strictly ascending"
                )));
            }
        }
        Ok(Self {
            bits,
            channels,
            values,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn per_channel(&self) -> usize {
        (1usize << self.bits) - 1
    }

    pub fn channel(&self, o: usize) -> &[i32] {
        let per = self.per_channel();
        &self.values[o * per..(o + 1) * per]
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }
}

/// Integer convolution results, channel-major like [`FeatureMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accumulators {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

impl Accumulators {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Scales every accumulator into a feature map.
    pub fn to_feature_map(&self, scale: f32) -> FeatureMap {
        FeatureMap::from_vec(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|a| *a as f32 * scale).collect(),
        )
        .expect("accumulator dims are positive")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f32) -> FeatureMap {
        FeatureMap::from_vec(1, 1, 1, vec![v]).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_linear(&scalar(1.0), 8, 1.0 / 127.0, 0).unwrap().codes(), &[127]);
        assert_eq!(quantize_linear(&scalar(-3.7), 8, 1.0, 0).unwrap().codes(), &[-4]);
        assert_eq!(quantize_linear(&scalar(10.0), 3, 1.0, 0).unwrap().codes(), &[3]);
        assert_eq!(quantize_linear(&scalar(-2.5), 8, 1.0, 0).unwrap().codes(), &[-3]);
        assert!(quantize_linear(&scalar(1.0), 9, 1.0, 0).is_err());
        assert!(quantize_linear(&scalar(1.0), 8, 0.0, 0).is_err());
    }

    #[test]
    fn unsigned_codes_clamp_at_zero() {
        let fm = FeatureMap::from_vec(1, 1, 3, vec![-1.0, 3.4, 12.0]).unwrap();
        assert_eq!(quantize_unsigned(&fm, 3, 1.0).unwrap().codes(), &[0, 3, 7]);
    }

    #[test]
    fn rshift_examples() {
        assert_eq!(rshift_round(23, 4), 1);
        assert_eq!(rshift_round(24, 4), 2);
        assert_eq!(rshift_round(-24, 4), -1);
        assert_eq!(rshift_round(-17, 0), -17);
    }

    #[test]
    fn threshold_examples() {
        let th = [0, 2, 4, 6, 8, 10, 12];
        assert_eq!(threshold_activate(5, &th), 3);
        assert_eq!(threshold_activate(-1, &th), 0);
        assert_eq!(threshold_activate(12, &th), 7);
        assert_eq!(threshold_activate(1000, &th), 7);
    }

    #[test]
    fn threshold_set_requires_strict_ascent() {
        assert!(ThresholdSet::new(3, 1, vec![0, 1, 2, 3, 4, 5, 6]).is_ok());
        assert!(ThresholdSet::new(3, 1, vec![0, 1, 1, 3, 4, 5, 6]).is_err());
        assert!(ThresholdSet::new(3, 2, vec![0, 1, 2, 3, 4, 5, 6]).is_err());
    }

    #[test]
    fn codes_must_fit_width() {
        let spec = QuantSpec::unsigned_codes(3, 1.0);
        assert!(QuantTensor::new((1, 1, 2), vec![0, 7], spec).is_ok());
        assert!(QuantTensor::new((1, 1, 2), vec![0, 8], spec).is_err());
        assert!(QuantTensor::new((1, 1, 1), vec![-1], spec).is_err());
    }

    #[test]
    fn unshifted_sixteen_bit_reduction_rejected() {
        let qs = QuantSpec::eight_bit(1.0).with_accumulator(AccumulatorWidth::Bits16, 0);
        assert!(qs.check_reduction(27).is_err());
        let qs = QuantSpec::eight_bit(1.0).with_accumulator(AccumulatorWidth::Bits16, 4);
        assert!(qs.check_reduction(27).is_ok());
        assert!(QuantSpec::eight_bit(1.0)
            .with_accumulator(AccumulatorWidth::Bits32, 4)
            .validate()
            .is_err());
    }

    proptest! {
        #[test]
        fn rshift_error_bounded(x in -(1i32 << 24)..(1i32 << 24), n in 0u32..20) {
            // 2 * (r * 2^n - x) must lie in (-2^n, 2^n]
            let r = rshift_round(x, n) as i64;
            let twice_err = 2 * (r * (1i64 << n) - x as i64);
            prop_assert!(twice_err > -(1i64 << n) && twice_err <= (1i64 << n));
        }

        #[test]
        fn quantize_monotone(a in -300f32..300.0, b in -300f32..300.0, bits in 1u8..=8, scale in 0.01f32..4.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ql = quantize_linear(&scalar(lo), bits, scale, 0).unwrap().codes()[0];
            let qh = quantize_linear(&scalar(hi), bits, scale, 0).unwrap().codes()[0];
            prop_assert!(ql <= qh);
        }
    }
}

//! Executable networks.
//!
//! A [`NetworkConfig`] plus its parameters becomes a flat list of
//! [`LayerStage`]s, each of which maps one feature map to the next. Binary
//! layers work on integer codes carried in feature maps; a `quantize` stage
//! in front of a binary run and a `dequantize` stage behind it convert
//! between the two domains. Offload layers get the same pair around them, so
//! a network runs bit-identically whether its binary run is offloaded or
//! executed layer by layer.
//!
//! Region layers are not executed here; the network output is the region
//! layer's input.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{activate, conv_forward_im2col, conv_forward_ref, maxpool_forward, ConvSpec, WeightSet};
use crate::lowp::{
    binary_conv, fused_conv_lowp, maxpool_codes, quantize_linear, quantize_unsigned,
    quantize_weights_symmetric, AccumulatorWidth, BinaryWeightSet, QuantSpec, QuantTensor,
    QuantWeights, ThresholdSet,
};
use crate::netcfg::{ConvLayer, Dims, LayerDesc, LayerWeights, NetworkConfig, NetworkWeights};
use crate::offload::{make_offload_layer, BackendRegistry, OffloadLayer};
use crate::tensor::FeatureMap;

/// How quantization-sensitive (8-bit input/output) layers are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Fixed-point fused kernel.
    #[default]
    LowPrecision,
    /// Full-precision reference convolution with the same float weights.
    FloatReference,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub precision: Precision,
    /// Slice width of the fused kernel.
    pub lanes: usize,
    pub registry: BackendRegistry,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            precision: Precision::LowPrecision,
            lanes: 8,
            registry: BackendRegistry::with_builtin(),
        }
    }
}

/// 8-bit convolution: signed 8-bit inputs and weights, integer
/// accumulation, float bias and activation on the rescaled result.
#[derive(Debug, Clone)]
pub struct QuantConv {
    pub spec: ConvSpec,
    pub float: WeightSet,
    pub weights: QuantWeights,
    pub weight_scale: f32,
    pub input_bits: u8,
    /// Fixed input step; calibrated from each frame's peak when `None`.
    pub input_scale: Option<f32>,
    pub accumulator: AccumulatorWidth,
    pub pre_shift: u32,
    pub lanes: usize,
    pub precision: Precision,
}

impl QuantConv {
    fn new(conv: &ConvLayer, in_c: usize, float: WeightSet, opts: &EngineOptions) -> Result<Self> {
        let (codes, weight_scale) = quantize_weights_symmetric(&float.weights, conv.weight_bits);
        let weights = QuantWeights::new(conv.filters, in_c, conv.size, conv.weight_bits, codes)?;
        Ok(Self {
            spec: conv.spec(),
            float,
            weights,
            weight_scale,
            input_bits: conv.activation_bits,
            input_scale: conv.input_scale,
            accumulator: conv.accumulator,
            pre_shift: conv.pre_shift,
            lanes: opts.lanes,
            precision: opts.precision,
        })
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if self.precision == Precision::FloatReference {
            return conv_forward_ref(input, &self.float, &self.spec);
        }
        let max_code = ((1i32 << (self.input_bits - 1)) - 1) as f32;
        let scale = self.input_scale.unwrap_or_else(|| {
            let peak = input.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                peak / max_code
            } else {
                1.0
            }
        });
        let q = quantize_linear(input, self.input_bits, scale, 0)?;
        let mut qs = QuantSpec::eight_bit(scale).with_accumulator(self.accumulator, self.pre_shift);
        qs.activation_bits = self.input_bits;
        qs.weight_bits = self.weights.bits;
        let acc = fused_conv_lowp(&q, &self.weights, &self.spec, &qs, self.lanes)?;
        let step = scale * self.weight_scale * (1u32 << self.pre_shift) as f32;
        let plane = acc.height * acc.width;
        let data = acc
            .data
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let b = self.float.bias.get(i / plane).copied().unwrap_or(0.0);
                activate(*a as f32 * step + b, self.spec.activation)
            })
            .collect();
        FeatureMap::from_vec(acc.channels, acc.height, acc.width, data)
    }
}

/// One executable step of a network.
#[derive(Debug)]
pub enum LayerStage {
    FloatConv {
        spec: ConvSpec,
        weights: WeightSet,
    },
    QuantConv(Box<QuantConv>),
    Pool {
        size: usize,
        stride: usize,
    },
    /// Real values to unsigned codes.
    Quantize {
        bits: u8,
        scale: f32,
    },
    BinaryConv {
        spec: ConvSpec,
        input_bits: u8,
        weights: BinaryWeightSet,
        thresholds: ThresholdSet,
    },
    CodePool {
        bits: u8,
        size: usize,
        stride: usize,
    },
    Offload(OffloadLayer),
    /// Codes back to real values.
    Dequantize {
        scale: f32,
    },
}

impl LayerStage {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::FloatConv { .. } => "conv",
            Self::QuantConv(_) => "conv-8bit",
            Self::Pool { .. } => "pool",
            Self::Quantize { .. } => "quantize",
            Self::BinaryConv { .. } => "conv-binary",
            Self::CodePool { .. } => "pool-codes",
            Self::Offload(_) => "offload",
            Self::Dequantize { .. } => "dequantize",
        }
    }

    pub fn forward(&mut self, input: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Self::FloatConv { spec, weights } => conv_forward_im2col(input, weights, spec),
            Self::QuantConv(q) => q.forward(input),
            Self::Pool { size, stride } => maxpool_forward(input, *size, *stride),
            Self::Quantize { bits, scale } => Ok(quantize_unsigned(input, *bits, *scale)?.to_code_map()),
            Self::BinaryConv {
                spec,
                input_bits,
                weights,
                thresholds,
            } => {
                let q = QuantTensor::from_code_map(input, QuantSpec::unsigned_codes(*input_bits, 1.0))?;
                Ok(binary_conv(&q, weights, spec, thresholds)?.to_code_map())
            }
            Self::CodePool { bits, size, stride } => {
                let q = QuantTensor::from_code_map(input, QuantSpec::unsigned_codes(*bits, 1.0))?;
                Ok(maxpool_codes(&q, *size, *stride)?.to_code_map())
            }
            Self::Offload(layer) => layer.forward(input),
            Self::Dequantize { scale } => {
                let s = *scale;
                let data = input.data().iter().map(|q| q * s).collect();
                FeatureMap::from_vec(input.channels(), input.height(), input.width(), data)
            }
        }
    }
}

/// A [`LayerStage`] with its label and geometry.
#[derive(Debug)]
pub struct NetStage {
    pub label: String,
    pub input: Dims,
    pub output: Dims,
    pub stage: LayerStage,
}

impl NetStage {
    pub fn forward(&mut self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.dims() != self.input {
            return Err(Error::Geometry(format!(
                "{}: input {:?}, expected {:?}",
                self.label,
                input.dims(),
                self.input
            )));
        }
        self.stage.forward(input)
    }
}

impl fmt::Display for NetStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.output;
        write!(f, "{:<24} -> {c}x{h}x{w}", self.label)
    }
}

#[derive(Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub stages: Vec<NetStage>,
}

/// Tracks whether the data between stages is real-valued or coded.
#[derive(Clone, Copy)]
enum Domain {
    Real,
    Codes(u8),
}

impl Network {
    pub fn build(config: &NetworkConfig, weights: &NetworkWeights, opts: &EngineOptions) -> Result<Self> {
        let shapes = config.shapes()?;
        if weights.layers.len() != config.layers.len() {
            return Err(Error::Config(format!(
                "{} parameter sets for {} layers",
                weights.layers.len(),
                config.layers.len()
            )));
        }
        let mut stages = Vec::new();
        let mut domain = Domain::Real;
        let mut push = |label: String, input: Dims, output: Dims, stage: LayerStage| {
            stages.push(NetStage {
                label,
                input,
                output,
                stage,
            })
        };
        for (i, ((layer, w), (din, dout))) in config.layers.iter().zip(&weights.layers).zip(shapes).enumerate() {
            let n = i + 1;
            let mismatch = || Error::Config(format!("layer {n} has mismatched parameters"));
            match layer {
                LayerDesc::Convolutional(c) if c.binary => {
                    let LayerWeights::Binary { weights, thresholds } = w else {
                        return Err(mismatch());
                    };
                    let input_bits = match domain {
                        Domain::Codes(b) => b,
                        Domain::Real => {
                            let bits = c.activation_bits;
                            push(
                                "quantize".into(),
                                din,
                                din,
                                LayerStage::Quantize {
                                    bits,
                                    scale: c.input_scale.unwrap_or(1.0),
                                },
                            );
                            bits
                        }
                    };
                    push(
                        format!("conv {n} binary"),
                        din,
                        dout,
                        LayerStage::BinaryConv {
                            spec: c.spec(),
                            input_bits,
                            weights: weights.clone(),
                            thresholds: thresholds.clone(),
                        },
                    );
                    domain = Domain::Codes(thresholds.bits());
                }
                LayerDesc::Maxpool { size, stride } => {
                    let (size, stride) = (*size, *stride);
                    let stage = match domain {
                        Domain::Codes(bits) => LayerStage::CodePool { bits, size, stride },
                        Domain::Real => LayerStage::Pool { size, stride },
                    };
                    push(format!("pool {n}"), din, dout, stage);
                }
                LayerDesc::Region(_) => {}
                _ => {
                    if let Domain::Codes(_) = domain {
                        push("dequantize".into(), din, din, LayerStage::Dequantize { scale: 1.0 });
                        domain = Domain::Real;
                    }
                    match (layer, w) {
                        (LayerDesc::Convolutional(c), LayerWeights::Float(set)) if c.quantized_io => {
                            let q = QuantConv::new(c, din.0, set.clone(), opts)?;
                            push(format!("conv {n} 8-bit"), din, dout, LayerStage::QuantConv(Box::new(q)));
                        }
                        (LayerDesc::Convolutional(c), LayerWeights::Float(set)) => push(
                            format!("conv {n}"),
                            din,
                            dout,
                            LayerStage::FloatConv {
                                spec: c.spec(),
                                weights: set.clone(),
                            },
                        ),
                        (LayerDesc::Offload(off), LayerWeights::Offload(subs)) => {
                            let sub = off.sub.as_ref().ok_or_else(|| {
                                Error::Config(format!("offload layer {n} has no resolved sub-topology"))
                            })?;
                            let layer = make_offload_layer(off, din, subs, &opts.registry, config.line(i))?;
                            push(
                                "pre".into(),
                                din,
                                din,
                                LayerStage::Quantize {
                                    bits: sub.input_bits,
                                    scale: sub.input_scale,
                                },
                            );
                            push(format!("offload {}", off.library), din, dout, LayerStage::Offload(layer));
                            push(
                                "post".into(),
                                dout,
                                dout,
                                LayerStage::Dequantize {
                                    scale: sub.output_scale,
                                },
                            );
                        }
                        _ => return Err(mismatch()),
                    }
                }
            }
        }
        if let Domain::Codes(_) = domain {
            let d = config.output_dims()?;
            push("dequantize".into(), d, d, LayerStage::Dequantize { scale: 1.0 });
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn input_dims(&self) -> Dims {
        self.config.input
    }

    pub fn output_dims(&self) -> Dims {
        self.stages.last().map(|s| s.output).unwrap_or(self.config.input)
    }

    pub fn forward(&mut self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.dims() != self.config.input {
            return Err(Error::Geometry(format!(
                "network input {:?}, expected {:?}",
                input.dims(),
                self.config.input
            )));
        }
        let mut cur = input.clone();
        for stage in &mut self.stages {
            cur = stage.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn into_stages(self) -> Vec<NetStage> {
        self.stages
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::netcfg::{derive_tincy, offload_hidden, ConvLayer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A Tincy-shaped network at 64x64 so tests stay fast.
    fn small_tincy() -> NetworkConfig {
        let mut tiny = crate::netcfg::tiny_yolo();
        tiny.input = (3, 64, 64);
        let mut net = derive_tincy(&tiny).unwrap();
        net.input = (3, 64, 64);
        net
    }

    fn random_input(seed: u64, dims: Dims) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        FeatureMap::from_vec(dims.0, dims.1, dims.2, (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn stage_lists() {
        let net = small_tincy();
        let w = NetworkWeights::random(&net, 1).unwrap();
        let flat = Network::build(&net, &w, &EngineOptions::default()).unwrap();
        assert_eq!(flat.stages.len(), 16);
        assert_eq!(flat.output_dims(), (125, 2, 2));

        let off = offload_hidden(&net, "fabric.so", "h.json", "w").unwrap();
        let ow = NetworkWeights::random(&off, 1).unwrap();
        let n = Network::build(&off, &ow, &EngineOptions::default()).unwrap();
        let labels: Vec<&str> = n.stages.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["conv 1 8-bit", "pre", "offload fabric.so", "post", "conv 3 8-bit"]);
    }

    #[test]
    fn offload_changes_no_output_bit() {
        let net = small_tincy();
        let w = NetworkWeights::random(&net, 7).unwrap();
        let off = offload_hidden(&net, "fabric.so", "h.json", "w").unwrap();
        // same parameters, regrouped under the offload layer
        let mut layers = vec![w.layers[0].clone()];
        layers.push(LayerWeights::Offload(w.layers[1..13].to_vec()));
        layers.extend(w.layers[13..].iter().cloned());
        let ow = NetworkWeights { layers };

        let opts = EngineOptions::default();
        let mut a = Network::build(&net, &w, &opts).unwrap();
        let mut b = Network::build(&off, &ow, &opts).unwrap();
        for seed in 0..3 {
            let x = random_input(seed, net.input);
            let ya = a.forward(&x).unwrap();
            let yb = b.forward(&x).unwrap();
            assert_eq!(ya.data(), yb.data());
        }
    }

    #[test]
    fn float_reference_switch_tracks_low_precision() {
        let net = NetworkConfig::new(
            "q",
            (3, 12, 12),
            vec![LayerDesc::Convolutional(
                ConvLayer::new(8, 3, 1, 1, Activation::Relu).quantized(8, 8),
            )],
        );
        let w = NetworkWeights::random(&net, 3).unwrap();
        let x = random_input(4, net.input);
        let mut lp = Network::build(&net, &w, &EngineOptions::default()).unwrap();
        let opts = EngineOptions {
            precision: Precision::FloatReference,
            ..Default::default()
        };
        let mut fr = Network::build(&net, &w, &opts).unwrap();
        let (a, b) = (lp.forward(&x).unwrap(), fr.forward(&x).unwrap());
        let peak = b.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 0.05 * peak, "{p} vs {q}");
        }
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn sixteen_bit_first_layer_with_shift() {
        let mut conv = ConvLayer::new(16, 3, 1, 1, Activation::Relu).quantized(8, 8);
        conv.accumulator = AccumulatorWidth::Bits16;
        conv.pre_shift = 4;
        let net = NetworkConfig::new("q16", (3, 10, 10), vec![LayerDesc::Convolutional(conv)]);
        let w = NetworkWeights::random(&net, 5).unwrap();
        let x = random_input(6, net.input);
        let y = Network::build(&net, &w, &EngineOptions::default()).unwrap().forward(&x).unwrap();
        let opts = EngineOptions {
            precision: Precision::FloatReference,
            ..Default::default()
        };
        let r = Network::build(&net, &w, &opts).unwrap().forward(&x).unwrap();
        let peak = r.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (p, q) in y.data().iter().zip(r.data()) {
            assert!((p - q).abs() <= 0.1 * peak);
        }
    }

    #[test]
    fn rejects_wrong_input_dims() {
        let net = small_tincy();
        let w = NetworkWeights::random(&net, 1).unwrap();
        let mut n = Network::build(&net, &w, &EngineOptions::default()).unwrap();
        assert!(n.forward(&FeatureMap::new(3, 32, 32).unwrap()).is_err());
    }
}

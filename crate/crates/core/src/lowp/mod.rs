//! Reduced-precision arithmetic: linear quantization, the lane-sliced
//! fused convolution kernel, and the binary-weight engine that emulates the
//! offloaded QNN accelerator bit for bit.

mod binary;
mod fused;
mod quant;

pub use binary::{binary_conv, binary_conv_acc, maxpool_codes, BinaryWeightSet};
pub use fused::{fused_conv_lowp, quantize_weights_symmetric, QuantWeights, SUPPORTED_LANES};
pub use quant::{
    code_range, quantize_linear, quantize_unsigned, rshift_round, threshold_activate,
    AccumulatorWidth, Accumulators, QuantSpec, QuantTensor, ThresholdSet,
};

//! Darknet-style network descriptions.
//!
//! Covers the config text format (including the `[offload]` section), the
//! weight file formats, the per-layer workload model, and the topology
//! transforms that turn Tiny YOLO into Tincy YOLO.

mod ops;
mod parse;
mod topology;
mod weights;

pub use ops::{count_ops, LayerOps, OpClass, OpCount};
pub use parse::{load_config, load_sub_topology, parse_config, parse_sub_topology, serialize_config, serialize_sub_topology};
pub use topology::{derive_tincy, offload_hidden, reference_topologies, tincy_yolo, tiny_yolo, DEFAULT_ANCHORS};
pub use weights::{
    load_weights, read_binary_layer, read_float_weights, save_weights, write_binary_layer,
    write_float_weights, LayerWeights, NetworkWeights, FLOAT_WEIGHTS_FILE, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};

use crate::error::{Error, Result};
use crate::layers::{conv_output_dims, pool_output_dim, Activation, ConvSpec};
use crate::lowp::AccumulatorWidth;

/// `(channels, height, width)`.
pub type Dims = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    /// Binary weights with threshold activation (offloadable hidden layer).
    pub binary: bool,
    /// 8-bit fixed-point input/output layer.
    pub quantized_io: bool,
    /// Output code width for binary layers, input code width for
    /// quantized layers.
    pub activation_bits: u8,
    pub weight_bits: u8,
    pub accumulator: AccumulatorWidth,
    pub pre_shift: u32,
    /// Fixed input quantization step; `None` calibrates per frame.
    pub input_scale: Option<f32>,
}

impl ConvLayer {
    pub fn new(filters: usize, size: usize, stride: usize, pad: usize, activation: Activation) -> Self {
        Self {
            filters,
            size,
            stride,
            pad,
            activation,
            binary: false,
            quantized_io: false,
            activation_bits: 8,
            weight_bits: 8,
            accumulator: AccumulatorWidth::Bits32,
            pre_shift: 0,
            input_scale: None,
        }
    }

    /// Marks the layer binary with `bits`-wide output codes.
    pub fn binarized(mut self, bits: u8) -> Self {
        self.binary = true;
        self.quantized_io = false;
        self.activation_bits = bits;
        self.weight_bits = 1;
        self
    }

    pub fn quantized(mut self, activation_bits: u8, weight_bits: u8) -> Self {
        self.quantized_io = true;
        self.binary = false;
        self.activation_bits = activation_bits;
        self.weight_bits = weight_bits;
        self
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.size, self.stride, self.pad, self.filters).with_activation(self.activation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadDesc {
    /// Registry key of the backend, e.g. `fabric.so`.
    pub library: String,
    /// Path of the sub-topology document, relative to the config file.
    pub network: String,
    /// Directory holding the sub-layers' binary parameters.
    pub weights: String,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    /// Resolved sub-topology, when loaded.
    pub sub: Option<SubTopology>,
}

impl OffloadDesc {
    pub fn out_dims(&self) -> Dims {
        (self.out_channels, self.out_height, self.out_width)
    }
}

/// Layers subsumed by an offload layer plus the code-domain scales used by
/// the stages around it.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTopology {
    pub layers: Vec<LayerDesc>,
    /// Width of the codes entering the first sub-layer.
    pub input_bits: u8,
    /// Real value of one input code step.
    pub input_scale: f32,
    /// Real value of one output code step.
    pub output_scale: f32,
}

impl SubTopology {
    pub fn new(layers: Vec<LayerDesc>) -> Self {
        Self {
            layers,
            input_bits: 3,
            input_scale: 1.0,
            output_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDesc {
    pub num: usize,
    pub classes: usize,
    pub anchors: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Convolutional(ConvLayer),
    Maxpool { size: usize, stride: usize },
    Offload(OffloadDesc),
    Region(RegionDesc),
}

impl LayerDesc {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Convolutional(_) => "conv",
            Self::Maxpool { .. } => "pool",
            Self::Offload(_) => "offload",
            Self::Region(_) => "region",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match self {
            Self::Convolutional(c) => Some(c),
            _ => None,
        }
    }

    /// Output dims for input `dims`.
    pub fn output_dims(&self, dims: Dims) -> Result<Dims> {
        let (c, h, w) = dims;
        match self {
            Self::Convolutional(conv) => {
                if conv.filters == 0 {
                    return Err(Error::Geometry("convolution needs at least one filter".into()));
                }
                let (ho, wo) = conv_output_dims(h, w, conv.size, conv.stride, conv.pad)?;
                Ok((conv.filters, ho, wo))
            }
            Self::Maxpool { size, stride } => {
                if *size == 0 || *stride == 0 {
                    return Err(Error::Geometry("maxpool size and stride must be positive".into()));
                }
                Ok((c, pool_output_dim(h, *size, *stride), pool_output_dim(w, *size, *stride)))
            }
            Self::Offload(off) => {
                let declared = off.out_dims();
                if declared.0 == 0 || declared.1 == 0 || declared.2 == 0 {
                    return Err(Error::Geometry("offload output dims must be positive".into()));
                }
                if let Some(sub) = &off.sub {
                    let got = chain_dims(&sub.layers, dims).map_err(|(i, e)| {
                        Error::Geometry(format!("offload sub-layer {i}: {e}"))
                    })?;
                    let last = got.last().map(|d| d.1).unwrap_or(dims);
                    if last != declared {
                        return Err(Error::Geometry(format!(
                            "offload declares output {declared:?} but its sub-topology yields {last:?}"
                        )));
                    }
                }
                Ok(declared)
            }
            Self::Region(r) => {
                let expect = r.num * (r.classes + 5);
                if c != expect {
                    return Err(Error::Geometry(format!(
                        "region layer expects {expect} channels, got {c}"
                    )));
                }
                if r.anchors.len() != 2 * r.num {
                    return Err(Error::Geometry(format!(
                        "region layer needs {} anchor values, got {}",
                        2 * r.num,
                        r.anchors.len()
                    )));
                }
                Ok(dims)
            }
        }
    }
}

/// Input/output dims of every layer in `layers`, starting from `input`.
/// On failure, reports the index of the first offending layer.
pub fn chain_dims(
    layers: &[LayerDesc],
    input: Dims,
) -> std::result::Result<Vec<(Dims, Dims)>, (usize, Error)> {
    let mut cur = input;
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let next = layer.output_dims(cur).map_err(|e| (i, e))?;
        out.push((cur, next));
        cur = next;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub name: String,
    pub input: Dims,
    pub layers: Vec<LayerDesc>,
    /// Config line of each layer's section header, when parsed from text.
    pub lines: Vec<Option<usize>>,
}

impl PartialEq for NetworkConfig {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.input == other.input && self.layers == other.layers
    }
}

impl NetworkConfig {
    pub fn new(name: impl Into<String>, input: Dims, layers: Vec<LayerDesc>) -> Self {
        let lines = vec![None; layers.len()];
        Self {
            name: name.into(),
            input,
            layers,
            lines,
        }
    }

    /// Per-layer `(input, output)` dims.
    pub fn shapes(&self) -> Result<Vec<(Dims, Dims)>> {
        chain_dims(&self.layers, self.input).map_err(|(i, e)| match self.line(i) {
            Some(line) => Error::Parse {
                line,
                msg: e.to_string(),
            },
            None => Error::Geometry(format!("layer {}: {e}", i + 1)),
        })
    }

    pub fn output_dims(&self) -> Result<Dims> {
        Ok(self.shapes()?.last().map(|s| s.1).unwrap_or(self.input))
    }

    pub fn line(&self, index: usize) -> Option<usize> {
        self.lines.get(index).copied().flatten()
    }

    pub fn region(&self) -> Option<&RegionDesc> {
        self.layers.iter().find_map(|l| match l {
            LayerDesc::Region(r) => Some(r),
            _ => None,
        })
    }
}

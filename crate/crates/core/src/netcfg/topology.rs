//! Reference topologies and the transforms between them.

use super::{ConvLayer, LayerDesc, NetworkConfig, OffloadDesc, RegionDesc, SubTopology};
use crate::error::{Error, Result};
use crate::layers::Activation;

/// VOC region anchors as `(w, h)` pairs in grid cells.
pub const DEFAULT_ANCHORS: [f32; 10] = [1.08, 1.19, 3.42, 4.41, 6.63, 11.38, 9.42, 5.11, 16.62, 10.52];

fn conv(filters: usize, size: usize, act: Activation) -> LayerDesc {
    LayerDesc::Convolutional(ConvLayer::new(filters, size, 1, size / 2, act))
}

fn pool(stride: usize) -> LayerDesc {
    LayerDesc::Maxpool { size: 2, stride }
}

/// The 15-layer Tiny YOLO VOC network plus its region layer.
pub fn tiny_yolo() -> NetworkConfig {
    let leaky = Activation::LeakyRelu;
    let mut layers = Vec::new();
    for (i, filters) in [16, 32, 64, 128, 256, 512].into_iter().enumerate() {
        layers.push(conv(filters, 3, leaky));
        layers.push(pool(if i == 5 { 1 } else { 2 }));
    }
    layers.push(conv(1024, 3, leaky));
    layers.push(conv(1024, 3, leaky));
    layers.push(conv(125, 1, Activation::Linear));
    layers.push(LayerDesc::Region(RegionDesc {
        num: 5,
        classes: 20,
        anchors: DEFAULT_ANCHORS.to_vec(),
    }));
    NetworkConfig::new("tiny-yolo", (3, 416, 416), layers)
}

pub fn tincy_yolo() -> NetworkConfig {
    derive_tincy(&tiny_yolo()).expect("reference topology is Tiny-shaped")
}

/// `(tiny, tincy)`.
pub fn reference_topologies() -> (NetworkConfig, NetworkConfig) {
    let tiny = tiny_yolo();
    let tincy = derive_tincy(&tiny).expect("reference topology is Tiny-shaped");
    (tiny, tincy)
}

const TINY_KINDS: [&str; 15] = [
    "conv", "pool", "conv", "pool", "conv", "pool", "conv", "pool", "conv", "pool", "conv", "pool",
    "conv", "conv", "conv",
];

/// Applies the Tincy transforms to a Tiny-shaped network:
/// leaky activations become ReLU, layer 3 gets 64 filters, layers 13 and 14
/// get 512, and layer 2's pooling is folded into a stride-2 first layer.
/// The hidden convolutions become binary with 3-bit outputs; the first and
/// last convolutions get 8-bit inputs and weights.
pub fn derive_tincy(net: &NetworkConfig) -> Result<NetworkConfig> {
    let body = net
        .layers
        .iter()
        .take_while(|l| !matches!(l, LayerDesc::Region(_)))
        .count();
    let kinds: Vec<&str> = net.layers[..body].iter().map(LayerDesc::kind).collect();
    if kinds != TINY_KINDS || net.layers.len() > body + 1 {
        return Err(Error::Transform(format!(
            "expected a Tiny-shaped network, got layers {kinds:?}"
        )));
    }
    let filters = |i: usize| net.layers[i].as_conv().map(|c| c.filters).unwrap_or(0);
    if net.layers[0].as_conv().map(|c| c.stride) != Some(1) {
        return Err(Error::Transform("layer 1 must have stride 1".into()));
    }
    if net.layers[1] != pool(2) {
        return Err(Error::Transform("layer 2 must be a 2x2 stride-2 max-pool".into()));
    }
    if filters(2) != 32 || filters(12) != 1024 || filters(13) != 1024 {
        return Err(Error::Transform(
            "layers 3, 13 and 14 must have 32, 1024 and 1024 filters".into(),
        ));
    }

    let mut layers = net.layers.clone();
    for layer in &mut layers {
        if let LayerDesc::Convolutional(c) = layer {
            if c.activation == Activation::LeakyRelu {
                c.activation = Activation::Relu;
            }
        }
    }
    let set_filters = |l: &mut LayerDesc, f: usize| {
        if let LayerDesc::Convolutional(c) = l {
            c.filters = f;
        }
    };
    set_filters(&mut layers[2], 64);
    set_filters(&mut layers[12], 512);
    set_filters(&mut layers[13], 512);
    layers.remove(1);
    let last = body - 2;
    for (i, layer) in layers.iter_mut().enumerate() {
        if let LayerDesc::Convolutional(c) = layer {
            *c = if i == 0 {
                let mut first = c.clone().quantized(8, 8);
                first.stride = 2;
                first
            } else if i == last {
                c.clone().quantized(8, 8)
            } else {
                c.clone().binarized(3)
            };
        }
    }
    Ok(NetworkConfig::new("tincy-yolo", net.input, layers))
}

/// Replaces the hidden binary run (the first binary convolution through the
/// last binary convolution or pool following it) with one offload layer.
/// Codes entering the run are as wide as the first convolution's output
/// codes and take its `input_scale` (1.0 when unset).
pub fn offload_hidden(
    net: &NetworkConfig,
    library: &str,
    network_ref: &str,
    weights_ref: &str,
) -> Result<NetworkConfig> {
    let is_binary = |l: &LayerDesc| matches!(l, LayerDesc::Convolutional(c) if c.binary);
    let start = net
        .layers
        .iter()
        .position(is_binary)
        .ok_or_else(|| Error::Transform("no binary layers to offload".into()))?;
    let len = net.layers[start..]
        .iter()
        .take_while(|l| is_binary(l) || matches!(l, LayerDesc::Maxpool { .. }))
        .count();
    let end = start + len;
    let shapes = net.shapes()?;
    let out = shapes[end - 1].1;
    let sub_layers = net.layers[start..end].to_vec();
    let first = sub_layers[0].as_conv().expect("run starts with a binary conv");
    let (input_bits, input_scale) = (first.activation_bits, first.input_scale.unwrap_or(1.0));
    let mut sub = SubTopology::new(sub_layers);
    sub.input_bits = input_bits;
    sub.input_scale = input_scale;
    let mut layers = net.layers[..start].to_vec();
    layers.push(LayerDesc::Offload(OffloadDesc {
        library: library.into(),
        network: network_ref.into(),
        weights: weights_ref.into(),
        out_channels: out.0,
        out_height: out.1,
        out_width: out.2,
        sub: Some(sub),
    }));
    layers.extend_from_slice(&net.layers[end..]);
    Ok(NetworkConfig::new(net.name.clone(), net.input, layers))
}

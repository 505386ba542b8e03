//! Per-layer operation counts.
//!
//! A convolution costs one multiply and one add per kernel tap,
//! `2 * K^2 * C * C' * H' * W'`; a max-pool costs one comparison per window
//! element, `K^2 * H' * W'`. Offload layers are expanded into their
//! sub-layers; region layers are not counted.

use serde::Serialize;

use super::{chain_dims, Dims, LayerDesc, NetworkConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Float,
    EightBit,
    Reduced,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOps {
    /// 1-based position after offload expansion.
    pub number: usize,
    pub kind: &'static str,
    pub class: OpClass,
    pub output: Dims,
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCount {
    pub layers: Vec<LayerOps>,
    pub total: u64,
    pub float_ops: u64,
    pub eight_bit_ops: u64,
    /// Binary-weight convolutions.
    pub reduced_precision_ops: u64,
    pub pool_ops: u64,
}

impl OpCount {
    /// Fraction of all operations done at reduced precision.
    pub fn reduced_share(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.reduced_precision_ops as f64 / self.total as f64
        }
    }
}

fn layer_ops(layer: &LayerDesc, input: Dims, output: Dims) -> Option<(OpClass, u64)> {
    let (_, ho, wo) = output;
    match layer {
        LayerDesc::Convolutional(c) => {
            let class = if c.binary {
                OpClass::Reduced
            } else if c.quantized_io {
                OpClass::EightBit
            } else {
                OpClass::Float
            };
            let k = c.size as u64;
            Some((class, 2 * k * k * input.0 as u64 * c.filters as u64 * (ho * wo) as u64))
        }
        LayerDesc::Maxpool { size, .. } => Some((OpClass::Pool, (size * size * ho * wo) as u64)),
        _ => None,
    }
}

fn expand(layers: &[LayerDesc], input: Dims, out: &mut Vec<LayerOps>) -> Result<()> {
    let shapes = chain_dims(layers, input).map_err(|(i, e)| Error::Geometry(format!("layer {}: {e}", i + 1)))?;
    for (layer, (din, dout)) in layers.iter().zip(shapes) {
        if let LayerDesc::Offload(off) = layer {
            let sub = off
                .sub
                .as_ref()
                .ok_or_else(|| Error::Config("offload sub-topology not loaded".into()))?;
            expand(&sub.layers, din, out)?;
        } else if let Some((class, ops)) = layer_ops(layer, din, dout) {
            out.push(LayerOps {
                number: out.len() + 1,
                kind: layer.kind(),
                class,
                output: dout,
                ops,
            });
        }
    }
    Ok(())
}

pub fn count_ops(net: &NetworkConfig) -> Result<OpCount> {
    net.shapes()?;
    let mut layers = Vec::new();
    expand(&net.layers, net.input, &mut layers)?;
    let sum = |class: OpClass| layers.iter().filter(|l| l.class == class).map(|l| l.ops).sum();
    Ok(OpCount {
        total: layers.iter().map(|l| l.ops).sum(),
        float_ops: sum(OpClass::Float),
        eight_bit_ops: sum(OpClass::EightBit),
        reduced_precision_ops: sum(OpClass::Reduced),
        pool_ops: sum(OpClass::Pool),
        layers,
    })
}

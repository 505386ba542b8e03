//! Weight file formats.
//!
//! Float (and 8-bit input/output) convolutions share one little-endian file:
//! a header of four `u32` words (magic, version, layer count, reserved),
//! then for each such layer in network order `bias[C']` followed by
//! `weights[C' * C * K * K]` as `f32`.
//!
//! Binary layers live in a directory, one pair of files per layer, numbered
//! by the layer's 1-based position in its layer list:
//! `layerN-weights.bin` holds the packed sign bits (see
//! [`BinaryWeightSet`]), `layerN-thresholds.bin` holds `C' * (2^bits - 1)`
//! little-endian `i32` thresholds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{chain_dims, ConvLayer, Dims, LayerDesc, NetworkConfig};
use crate::error::{Error, Result};
use crate::layers::WeightSet;
use crate::lowp::{BinaryWeightSet, ThresholdSet};

pub const WEIGHTS_MAGIC: u32 = 0x544E_4359;
pub const WEIGHTS_VERSION: u32 = 1;
/// Name of the float weights file inside a weights directory.
pub const FLOAT_WEIGHTS_FILE: &str = "network.weights";

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    None,
    Float(WeightSet),
    Binary {
        weights: BinaryWeightSet,
        thresholds: ThresholdSet,
    },
    /// Parameters of an offload layer's sub-layers.
    Offload(Vec<LayerWeights>),
}

/// Per-layer parameters, parallel to `NetworkConfig::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub layers: Vec<LayerWeights>,
}

/// Top-level float conv layers: `(layer index, input channels, conv)`.
fn float_layers(net: &NetworkConfig) -> Result<Vec<(usize, usize, &ConvLayer)>> {
    let shapes = net.shapes()?;
    Ok(net
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            LayerDesc::Convolutional(c) if !c.binary => Some((i, shapes[i].0 .0, c)),
            _ => None,
        })
        .collect())
}

/// Decodes a float weights file for `net`.
pub fn read_float_weights(bytes: &[u8], net: &NetworkConfig) -> Result<Vec<WeightSet>> {
    let expected = float_layers(net)?;
    if bytes.len() < 16 {
        return Err(Error::Config(format!(
            "weights file too short for its header ({} bytes)",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != WEIGHTS_MAGIC {
        return Err(Error::Config(format!("bad weights magic {:#010x}", word(0))));
    }
    if word(1) != WEIGHTS_VERSION {
        return Err(Error::Config(format!("unsupported weights version {}", word(1))));
    }
    if word(2) as usize != expected.len() {
        return Err(Error::Config(format!(
            "weights file holds {} layers, config expects {}",
            word(2),
            expected.len()
        )));
    }
    let mut pos = 16;
    let mut out = Vec::with_capacity(expected.len());
    for (index, in_c, conv) in expected {
        let nb = conv.filters;
        let nw = conv.filters * in_c * conv.size * conv.size;
        let need = 4 * (nb + nw);
        if bytes.len() - pos < need {
            return Err(Error::WeightShape {
                layer: index + 1,
                msg: format!("needs {need} bytes, only {} left", bytes.len() - pos),
            });
        }
        let floats: Vec<f32> = bytes[pos..pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(bad) = floats.iter().find(|v| !v.is_finite()) {
            return Err(Error::WeightShape {
                layer: index + 1,
                msg: format!("non-finite parameter {bad}"),
            });
        }
        pos += need;
        let (bias, weights) = floats.split_at(nb);
        out.push(WeightSet::new(weights.to_vec(), bias.to_vec()));
    }
    if pos != bytes.len() {
        return Err(Error::Config(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

pub fn write_float_weights(sets: &[&WeightSet]) -> Vec<u8> {
    let mut out = Vec::new();
    for w in [WEIGHTS_MAGIC, WEIGHTS_VERSION, sets.len() as u32, 0] {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for set in sets {
        for v in set.bias.iter().chain(&set.weights) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn binary_paths(dir: &Path, number: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("layer{number}-weights.bin")),
        dir.join(format!("layer{number}-thresholds.bin")),
    )
}

/// Reads one binary layer; `number` is its 1-based position.
pub fn read_binary_layer(
    dir: &Path,
    number: usize,
    in_channels: usize,
    conv: &ConvLayer,
) -> Result<(BinaryWeightSet, ThresholdSet)> {
    let (wpath, tpath) = binary_paths(dir, number);
    let wbytes = fs::read(&wpath).map_err(|e| Error::file(&wpath, e))?;
    let shape_err = |msg: String| Error::WeightShape { layer: number, msg };
    let expect_w = conv.filters * BinaryWeightSet::row_bytes_for(in_channels, conv.size);
    if wbytes.len() != expect_w {
        return Err(shape_err(format!(
            "{} holds {} bytes, expected {expect_w}",
            wpath.display(),
            wbytes.len()
        )));
    }
    let weights = BinaryWeightSet::from_bytes(conv.filters, in_channels, conv.size, wbytes)?;
    let tbytes = fs::read(&tpath).map_err(|e| Error::file(&tpath, e))?;
    let per = (1usize << conv.activation_bits) - 1;
    let expect_t = 4 * conv.filters * per;
    if tbytes.len() != expect_t {
        return Err(shape_err(format!(
            "{} holds {} bytes, expected {expect_t}",
            tpath.display(),
            tbytes.len()
        )));
    }
    let values = tbytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let thresholds = ThresholdSet::new(conv.activation_bits, conv.filters, values)
        .map_err(|e| shape_err(e.to_string()))?;
    Ok((weights, thresholds))
}

pub fn write_binary_layer(
    dir: &Path,
    number: usize,
    weights: &BinaryWeightSet,
    thresholds: &ThresholdSet,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let (wpath, tpath) = binary_paths(dir, number);
    fs::write(&wpath, weights.bytes()).map_err(|e| Error::file(&wpath, e))?;
    let t: Vec<u8> = thresholds.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&tpath, t).map_err(|e| Error::file(&tpath, e))
}

fn load_binary_list(dir: &Path, layers: &[LayerDesc], input: Dims) -> Result<Vec<LayerWeights>> {
    let shapes = chain_dims(layers, input).map_err(|(_, e)| e)?;
    layers
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(i, (layer, (in_dims, _)))| match layer {
            LayerDesc::Convolutional(c) if c.binary => {
                let (weights, thresholds) = read_binary_layer(dir, i + 1, in_dims.0, c)?;
                Ok(LayerWeights::Binary {
                    weights,
                    thresholds,
                })
            }
            LayerDesc::Convolutional(_) => Err(Error::Config(format!(
                "offloaded layer {} must be a binary convolution",
                i + 1
            ))),
            _ => Ok(LayerWeights::None),
        })
        .collect()
}

/// Loads every layer's parameters.
///
/// `path` is either a float weights file or a directory holding
/// [`FLOAT_WEIGHTS_FILE`] plus the files of any top-level binary layers.
/// Offload weight directories resolve relative to `config_dir`.
pub fn load_weights(path: &Path, net: &NetworkConfig, config_dir: &Path) -> Result<NetworkWeights> {
    let shapes = net.shapes()?;
    let is_dir = path.is_dir();
    let float_path = if is_dir {
        path.join(FLOAT_WEIGHTS_FILE)
    } else {
        path.to_path_buf()
    };
    let mut floats = if float_layers(net)?.is_empty() && is_dir {
        Vec::new()
    } else {
        let bytes = fs::read(&float_path).map_err(|e| Error::file(&float_path, e))?;
        read_float_weights(&bytes, net)?
    }
    .into_iter();

    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let w = match layer {
            LayerDesc::Convolutional(c) if c.binary => {
                if !is_dir {
                    return Err(Error::Config(format!(
                        "layer {} is binary; pass a weights directory",
                        i + 1
                    )));
                }
                let (weights, thresholds) = read_binary_layer(path, i + 1, shapes[i].0 .0, c)?;
                LayerWeights::Binary {
                    weights,
                    thresholds,
                }
            }
            LayerDesc::Convolutional(_) => {
                LayerWeights::Float(floats.next().expect("one float set per float layer"))
            }
            LayerDesc::Offload(off) => {
                let sub = off.sub.as_ref().ok_or_else(|| {
                    Error::Config(format!("offload layer {} has no resolved sub-topology", i + 1))
                })?;
                LayerWeights::Offload(load_binary_list(
                    &config_dir.join(&off.weights),
                    &sub.layers,
                    shapes[i].0,
                )?)
            }
            _ => LayerWeights::None,
        };
        layers.push(w);
    }
    Ok(NetworkWeights { layers })
}

/// Writes `weights` in the layout [`load_weights`] reads. `path` is created
/// as a directory when the network has top-level binary layers.
pub fn save_weights(
    path: &Path,
    net: &NetworkConfig,
    weights: &NetworkWeights,
    config_dir: &Path,
) -> Result<()> {
    if weights.layers.len() != net.layers.len() {
        return Err(Error::Config("weights do not match the network".into()));
    }
    let has_binary = net
        .layers
        .iter()
        .any(|l| matches!(l, LayerDesc::Convolutional(c) if c.binary));
    let float_path = if has_binary || path.is_dir() {
        fs::create_dir_all(path).map_err(|e| Error::file(path, e))?;
        path.join(FLOAT_WEIGHTS_FILE)
    } else {
        path.to_path_buf()
    };
    let mut floats = Vec::new();
    for (i, (layer, w)) in net.layers.iter().zip(&weights.layers).enumerate() {
        match (layer, w) {
            (LayerDesc::Convolutional(c), LayerWeights::Float(set)) if !c.binary => floats.push(set),
            (LayerDesc::Convolutional(c), LayerWeights::Binary { weights, thresholds }) if c.binary => {
                write_binary_layer(path, i + 1, weights, thresholds)?
            }
            (LayerDesc::Offload(off), LayerWeights::Offload(subs)) => {
                let dir = config_dir.join(&off.weights);
                for (j, sw) in subs.iter().enumerate() {
                    if let LayerWeights::Binary { weights, thresholds } = sw {
                        write_binary_layer(&dir, j + 1, weights, thresholds)?;
                    }
                }
            }
            (LayerDesc::Maxpool { .. } | LayerDesc::Region(_), LayerWeights::None) => {}
            _ => {
                return Err(Error::Config(format!(
                    "layer {} has mismatched parameters",
                    i + 1
                )))
            }
        }
    }
    if !floats.is_empty() || !has_binary {
        fs::write(&float_path, write_float_weights(&floats)).map_err(|e| Error::file(&float_path, e))?;
    }
    Ok(())
}

fn random_float(rng: &mut ChaCha8Rng, in_c: usize, conv: &ConvLayer) -> WeightSet {
    let fan_in = (in_c * conv.size * conv.size) as f32;
    let a = (3.0 / fan_in).sqrt();
    WeightSet::new(
        (0..conv.filters * in_c * conv.size * conv.size)
            .map(|_| rng.gen_range(-a..a))
            .collect(),
        (0..conv.filters).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    )
}

/// Random signs with thresholds spread around zero, about one standard
/// deviation of the accumulator apart.
fn random_binary(rng: &mut ChaCha8Rng, in_c: usize, conv: &ConvLayer) -> Result<LayerWeights> {
    let row = in_c * conv.size * conv.size;
    let signs: Vec<i8> = (0..conv.filters * row)
        .map(|_| if rng.gen() { 1 } else { -1 })
        .collect();
    let per = (1i32 << conv.activation_bits) - 1;
    let step = ((row as f64).sqrt().round() as i32).max(1);
    let mut values = Vec::with_capacity(conv.filters * per as usize);
    for _ in 0..conv.filters {
        let offset = rng.gen_range(-step..=step);
        values.extend((0..per).map(|j| offset + step * (2 * j - per + 1) / 2));
    }
    Ok(LayerWeights::Binary {
        weights: BinaryWeightSet::from_signs(conv.filters, in_c, conv.size, &signs)?,
        thresholds: ThresholdSet::new(conv.activation_bits, conv.filters, values)?,
    })
}

impl NetworkWeights {
    /// Deterministic random parameters for every layer of `net`.
    pub fn random(net: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = net.shapes()?;
        let mut layers = Vec::with_capacity(net.layers.len());
        for (layer, (in_dims, _)) in net.layers.iter().zip(shapes) {
            layers.push(match layer {
                LayerDesc::Convolutional(c) if c.binary => random_binary(&mut rng, in_dims.0, c)?,
                LayerDesc::Convolutional(c) => LayerWeights::Float(random_float(&mut rng, in_dims.0, c)),
                LayerDesc::Offload(off) => {
                    let sub = off.sub.as_ref().ok_or_else(|| {
                        Error::Config("offload layer has no resolved sub-topology".into())
                    })?;
                    let sub_shapes = chain_dims(&sub.layers, in_dims).map_err(|(_, e)| e)?;
                    let mut subs = Vec::new();
                    for (sl, (sd, _)) in sub.layers.iter().zip(sub_shapes) {
                        subs.push(match sl {
                            LayerDesc::Convolutional(c) if c.binary => random_binary(&mut rng, sd.0, c)?,
                            LayerDesc::Convolutional(_) => {
                                return Err(Error::Config(
                                    "offloaded convolutions must be binary".into(),
                                ))
                            }
                            _ => LayerWeights::None,
                        });
                    }
                    LayerWeights::Offload(subs)
                }
                _ => LayerWeights::None,
            });
        }
        Ok(Self { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::netcfg::{offload_hidden, tincy_yolo};

    fn first_layer_net() -> NetworkConfig {
        NetworkConfig::new(
            "one",
            (3, 8, 8),
            vec![LayerDesc::Convolutional(ConvLayer::new(16, 3, 1, 1, Activation::Relu))],
        )
    }

    #[test]
    fn first_layer_payload_size() {
        let net = first_layer_net();
        let w = NetworkWeights::random(&net, 1).unwrap();
        let sets: Vec<&WeightSet> = w
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerWeights::Float(s) => Some(s),
                _ => None,
            })
            .collect();
        let bytes = write_float_weights(&sets);
        assert_eq!(bytes.len() - 16, 1792);
        assert_eq!(read_float_weights(&bytes, &net).unwrap()[0], *sets[0]);
    }

    #[test]
    fn truncated_payload_names_the_layer() {
        let net = NetworkConfig::new(
            "two",
            (3, 8, 8),
            vec![
                LayerDesc::Convolutional(ConvLayer::new(4, 3, 1, 1, Activation::Relu)),
                LayerDesc::Maxpool { size: 2, stride: 2 },
                LayerDesc::Convolutional(ConvLayer::new(2, 1, 1, 0, Activation::Linear)),
            ],
        );
        let w = NetworkWeights::random(&net, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("two.weights");
        save_weights(&file, &net, &w, dir.path()).unwrap();
        let bytes = fs::read(&file).unwrap();
        let cut = &bytes[..bytes.len() - 4];
        match read_float_weights(cut, &net) {
            Err(Error::WeightShape { layer, .. }) => assert_eq!(layer, 3),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(read_float_weights(&bad, &net).is_err());
    }

    #[test]
    fn round_trip_with_offload_directory() {
        let net = offload_hidden(&tincy_yolo(), "fabric.so", "sub.json", "binparam/").unwrap();
        let w = NetworkWeights::random(&net, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("tincy.weights");
        save_weights(&file, &net, &w, dir.path()).unwrap();
        assert!(dir.path().join("binparam/layer1-weights.bin").exists());
        assert!(dir.path().join("binparam/layer1-thresholds.bin").exists());
        let back = load_weights(&file, &net, dir.path()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn round_trip_flat_binary_network() {
        let net = tincy_yolo();
        let w = NetworkWeights::random(&net, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let wdir = dir.path().join("weights");
        save_weights(&wdir, &net, &w, dir.path()).unwrap();
        assert_eq!(load_weights(&wdir, &net, dir.path()).unwrap(), w);
        // binary thresholds file with a wrong length
        fs::write(wdir.join("layer2-thresholds.bin"), [0u8; 12]).unwrap();
        assert!(matches!(
            load_weights(&wdir, &net, dir.path()),
            Err(Error::WeightShape { layer: 2, .. })
        ));
    }
}

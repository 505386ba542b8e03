//! Config text format: INI-like `[section]` headers, `key=value` lines and
//! `#` comment lines. The offload sub-topology document is JSON whose layer
//! objects use the same keys as the config sections.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde_json::{Map, Value};

use super::{ConvLayer, LayerDesc, NetworkConfig, OffloadDesc, RegionDesc, SubTopology};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::lowp::AccumulatorWidth;

struct Entry {
    key: String,
    value: String,
    line: usize,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    fn num<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| Error::Parse {
                line: e.line,
                msg: format!("expected a number for {key:?}, got {:?}", e.value),
            }),
        }
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        let e = self.get(key).ok_or_else(|| Error::Parse {
            line: self.line,
            msg: format!("[{}] requires key {key:?}", self.name),
        })?;
        e.value.parse().map_err(|_| Error::Parse {
            line: e.line,
            msg: format!("expected a number for {key:?}, got {:?}", e.value),
        })
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.get(key).map(|e| e.value.as_str())
    }

    fn warn_unknown(&self, known: &[&str]) {
        for e in &self.entries {
            if !known.contains(&e.key.as_str()) {
                warn!("line {}: ignoring unsupported key {:?} in [{}]", e.line, e.key, self.name);
            }
        }
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if s.starts_with('[') {
            let name = s
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .map(str::trim)
                .filter(|n| !n.is_empty() && !n.contains(['[', ']']))
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("malformed section header {s:?}"),
                })?;
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected key=value, got {s:?}"),
        })?;
        let section = sections.last_mut().ok_or_else(|| Error::Parse {
            line,
            msg: "key=value line before any section header".into(),
        })?;
        section.entries.push(Entry {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(sections)
}

fn flag(section: &Section, key: &str) -> Result<bool> {
    Ok(section.num::<u32>(key, 0)? != 0)
}

fn build_conv(s: &Section) -> Result<ConvLayer> {
    s.warn_unknown(&[
        "filters",
        "size",
        "stride",
        "pad",
        "padding",
        "activation",
        "binary",
        "quantized",
        "activation_bits",
        "weight_bits",
        "accumulator",
        "pre_shift",
        "input_scale",
    ]);
    let size = s.num("size", 1usize)?;
    let mut pad = s.num("padding", 0usize)?;
    if flag(s, "pad")? {
        pad = size / 2;
    }
    let activation = match s.get("activation") {
        None => Activation::Linear,
        Some(e) => e.value.parse().map_err(|err: Error| Error::Parse {
            line: e.line,
            msg: err.to_string(),
        })?,
    };
    let mut conv = ConvLayer::new(s.num("filters", 1)?, size, s.num("stride", 1)?, pad, activation);
    if flag(s, "binary")? {
        conv = conv.binarized(3);
    } else if flag(s, "quantized")? {
        conv = conv.quantized(8, 8);
    }
    conv.activation_bits = s.num("activation_bits", conv.activation_bits)?;
    conv.weight_bits = s.num("weight_bits", conv.weight_bits)?;
    let acc_line = s.get("accumulator").map(|e| e.line).unwrap_or(s.line);
    conv.accumulator = AccumulatorWidth::from_bits(s.num("accumulator", 32u32)?)
        .map_err(|e| Error::Parse {
            line: acc_line,
            msg: e.to_string(),
        })?;
    let default_shift = if conv.accumulator == AccumulatorWidth::Bits16 { 4 } else { 0 };
    conv.pre_shift = s.num("pre_shift", default_shift)?;
    conv.input_scale = match s.get("input_scale") {
        None => None,
        Some(_) => Some(s.num("input_scale", 0.0f32)?),
    };
    for (key, bits) in [("activation_bits", conv.activation_bits), ("weight_bits", conv.weight_bits)] {
        if !(1..=8).contains(&bits) {
            return Err(Error::Parse {
                line: s.get(key).map(|e| e.line).unwrap_or(s.line),
                msg: format!("{key} must be in 1..=8"),
            });
        }
    }
    if conv.size == 0 || conv.stride == 0 || conv.filters == 0 {
        return Err(Error::Parse {
            line: s.line,
            msg: "filters, size and stride must be positive".into(),
        });
    }
    Ok(conv)
}

fn build_layer(s: &Section) -> Result<LayerDesc> {
    match s.name.as_str() {
        "convolutional" | "conv" => Ok(LayerDesc::Convolutional(build_conv(s)?)),
        "maxpool" | "max" => {
            s.warn_unknown(&["size", "stride"]);
            let stride = s.num("stride", 1usize)?;
            let size = s.num("size", stride)?;
            if size == 0 || stride == 0 {
                return Err(Error::Parse {
                    line: s.line,
                    msg: "maxpool size and stride must be positive".into(),
                });
            }
            Ok(LayerDesc::Maxpool { size, stride })
        }
        "offload" => {
            s.warn_unknown(&["library", "network", "weights", "height", "width", "channel"]);
            let library = s.text("library").ok_or_else(|| Error::Parse {
                line: s.line,
                msg: "[offload] requires key \"library\"".into(),
            })?;
            Ok(LayerDesc::Offload(OffloadDesc {
                library: library.to_string(),
                network: s.text("network").unwrap_or_default().to_string(),
                weights: s.text("weights").unwrap_or_default().to_string(),
                out_height: s.required("height")?,
                out_width: s.required("width")?,
                out_channels: s.required("channel")?,
                sub: None,
            }))
        }
        "region" => {
            let known = ["anchors", "classes", "num", "coords"];
            for e in &s.entries {
                if !known.contains(&e.key.as_str()) {
                    log::debug!("line {}: ignoring region key {:?}", e.line, e.key);
                }
            }
            let coords = s.num("coords", 4usize)?;
            if coords != 4 {
                return Err(Error::Parse {
                    line: s.line,
                    msg: format!("only coords=4 is supported, got {coords}"),
                });
            }
            let anchors = match s.get("anchors") {
                None => super::DEFAULT_ANCHORS.to_vec(),
                Some(e) => e
                    .value
                    .split(',')
                    .map(|a| a.trim().parse::<f32>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Parse {
                        line: e.line,
                        msg: format!("malformed anchor list {:?}", e.value),
                    })?,
            };
            Ok(LayerDesc::Region(RegionDesc {
                num: s.num("num", 5)?,
                classes: s.num("classes", 20)?,
                anchors,
            }))
        }
        other => Err(Error::Parse {
            line: s.line,
            msg: format!("unsupported section [{other}]"),
        }),
    }
}

/// Parses config text. Offload sub-topologies are left unresolved; use
/// [`load_config`] to resolve them relative to the config file.
pub fn parse_config(text: &str) -> Result<NetworkConfig> {
    let sections = split_sections(text)?;
    let mut iter = sections.iter();
    let net = match iter.next() {
        Some(s) if s.name == "net" || s.name == "network" => s,
        _ => return Err(Error::Config("no [net] section".into())),
    };
    for e in &net.entries {
        if !["name", "channels", "height", "width"].contains(&e.key.as_str()) {
            warn!("line {}: ignoring [net] key {:?}", e.line, e.key);
        }
    }
    let input = (
        net.num("channels", 3usize)?,
        net.num("height", 0usize)?,
        net.num("width", 0usize)?,
    );
    if input.0 == 0 || input.1 == 0 || input.2 == 0 {
        return Err(Error::Parse {
            line: net.line,
            msg: format!("[net] needs positive channels/height/width, got {input:?}"),
        });
    }
    let mut layers = Vec::new();
    let mut lines = Vec::new();
    for s in iter {
        if s.name == "net" || s.name == "network" {
            return Err(Error::Parse {
                line: s.line,
                msg: "duplicate [net] section".into(),
            });
        }
        layers.push(build_layer(s)?);
        lines.push(Some(s.line));
    }
    let config = NetworkConfig {
        name: net.text("name").unwrap_or_default().to_string(),
        input,
        layers,
        lines,
    };
    config.shapes()?;
    Ok(config)
}

/// Reads a config file and resolves every offload sub-topology document
/// relative to the config's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<NetworkConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut config = parse_config(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for layer in &mut config.layers {
        if let LayerDesc::Offload(off) = layer {
            if !off.network.is_empty() {
                off.sub = Some(load_sub_topology(base.join(&off.network))?);
            }
        }
    }
    config.shapes()?;
    Ok(config)
}

pub fn load_sub_topology(path: impl AsRef<Path>) -> Result<SubTopology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_sub_topology(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn json_scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "1" } else { "0" }.to_string()),
        _ => None,
    }
}

/// Parses the JSON sub-topology document:
/// `{"input_bits": 3, "input_scale": 1.0, "output_scale": 1.0,
///   "layers": [{"type": "convolutional", "filters": 64, ...}, ...]}`.
pub fn parse_sub_topology(text: &str) -> Result<SubTopology> {
    let doc: Value = serde_json::from_str(text)?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Config("sub-topology must be a JSON object".into()))?;
    let layers_json = obj
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Config("sub-topology needs a \"layers\" array".into()))?;
    let mut layers = Vec::with_capacity(layers_json.len());
    for (i, l) in layers_json.iter().enumerate() {
        let fields = l
            .as_object()
            .ok_or_else(|| Error::Config(format!("sub-layer {i} is not an object")))?;
        let name = fields
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config(format!("sub-layer {i} has no \"type\"")))?;
        let mut entries = Vec::new();
        for (k, v) in fields.iter().filter(|(k, _)| *k != "type") {
            let value = json_scalar(v)
                .ok_or_else(|| Error::Config(format!("sub-layer {i}: key {k:?} must be a scalar")))?;
            entries.push(Entry {
                key: k.clone(),
                value,
                line: i + 1,
            });
        }
        let section = Section {
            name: name.to_string(),
            line: i + 1,
            entries,
        };
        let layer = build_layer(&section)
            .map_err(|e| Error::Config(format!("sub-layer {i}: {e}")))?;
        if matches!(layer, LayerDesc::Offload(_) | LayerDesc::Region(_)) {
            return Err(Error::Config(format!(
                "sub-layer {i}: [{name}] cannot appear inside an offload"
            )));
        }
        layers.push(layer);
    }
    let mut sub = SubTopology::new(layers);
    if let Some(v) = obj.get("input_bits") {
        sub.input_bits = v
            .as_u64()
            .filter(|b| (1..=8).contains(b))
            .ok_or_else(|| Error::Config("input_bits must be in 1..=8".into()))? as u8;
    }
    for (key, slot) in [("input_scale", &mut sub.input_scale), ("output_scale", &mut sub.output_scale)] {
        if let Some(v) = obj.get(key) {
            *slot = v
                .as_f64()
                .filter(|s| *s > 0.0)
                .ok_or_else(|| Error::Config(format!("{key} must be a positive number")))?
                as f32;
        }
    }
    Ok(sub)
}

/// Section name and `key=value` pairs, emitting only values that differ
/// from what the parser would assume.
fn layer_entries(layer: &LayerDesc) -> (&'static str, Vec<(&'static str, String)>) {
    match layer {
        LayerDesc::Convolutional(c) => {
            let mut kv = vec![
                ("filters", c.filters.to_string()),
                ("size", c.size.to_string()),
                ("stride", c.stride.to_string()),
            ];
            if c.pad > 0 && c.pad == c.size / 2 {
                kv.push(("pad", "1".into()));
            } else if c.pad > 0 {
                kv.push(("padding", c.pad.to_string()));
            }
            kv.push(("activation", c.activation.to_string()));
            let (def_act, def_wgt) = if c.binary {
                kv.push(("binary", "1".into()));
                (3, 1)
            } else {
                if c.quantized_io {
                    kv.push(("quantized", "1".into()));
                }
                (8, 8)
            };
            if c.activation_bits != def_act {
                kv.push(("activation_bits", c.activation_bits.to_string()));
            }
            if c.weight_bits != def_wgt {
                kv.push(("weight_bits", c.weight_bits.to_string()));
            }
            if c.accumulator != AccumulatorWidth::Bits32 {
                kv.push(("accumulator", c.accumulator.to_string()));
            }
            let def_shift = if c.accumulator == AccumulatorWidth::Bits16 { 4 } else { 0 };
            if c.pre_shift != def_shift {
                kv.push(("pre_shift", c.pre_shift.to_string()));
            }
            if let Some(s) = c.input_scale {
                kv.push(("input_scale", s.to_string()));
            }
            ("convolutional", kv)
        }
        LayerDesc::Maxpool { size, stride } => {
            ("maxpool", vec![("size", size.to_string()), ("stride", stride.to_string())])
        }
        LayerDesc::Offload(o) => {
            let mut kv = vec![("library", o.library.clone())];
            if !o.network.is_empty() {
                kv.push(("network", o.network.clone()));
            }
            if !o.weights.is_empty() {
                kv.push(("weights", o.weights.clone()));
            }
            kv.push(("height", o.out_height.to_string()));
            kv.push(("width", o.out_width.to_string()));
            kv.push(("channel", o.out_channels.to_string()));
            ("offload", kv)
        }
        LayerDesc::Region(r) => {
            let anchors = r.anchors.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",");
            (
                "region",
                vec![
                    ("anchors", anchors),
                    ("classes", r.classes.to_string()),
                    ("num", r.num.to_string()),
                ],
            )
        }
    }
}

/// Renders a config in the text format accepted by [`parse_config`].
/// Resolved sub-topologies are not inlined; write them with
/// [`serialize_sub_topology`].
pub fn serialize_config(net: &NetworkConfig) -> String {
    let mut out = String::from("[net]\n");
    if !net.name.is_empty() {
        let _ = writeln!(out, "name={}", net.name);
    }
    let _ = writeln!(out, "channels={}\nheight={}\nwidth={}", net.input.0, net.input.1, net.input.2);
    for layer in &net.layers {
        let (name, kv) = layer_entries(layer);
        let _ = writeln!(out, "\n[{name}]");
        for (k, v) in kv {
            let _ = writeln!(out, "{k}={v}");
        }
    }
    out
}

pub fn serialize_sub_topology(sub: &SubTopology) -> Result<String> {
    let mut layers = Vec::with_capacity(sub.layers.len());
    for layer in &sub.layers {
        if matches!(layer, LayerDesc::Offload(_) | LayerDesc::Region(_)) {
            return Err(Error::Config(format!("[{}] cannot appear inside an offload", layer.kind())));
        }
        let (name, kv) = layer_entries(layer);
        let mut obj = Map::new();
        obj.insert("type".into(), Value::String(name.into()));
        for (k, v) in kv {
            let value = match serde_json::from_str::<serde_json::Number>(&v) {
                Ok(n) => Value::Number(n),
                Err(_) => Value::String(v),
            };
            obj.insert(k.into(), value);
        }
        layers.push(Value::Object(obj));
    }
    let doc = serde_json::json!({
        "input_bits": sub.input_bits,
        "input_scale": sub.input_scale,
        "output_scale": sub.output_scale,
        "layers": layers,
    });
    Ok(serde_json::to_string_pretty(&doc)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcfg::Dims;
    use proptest::prelude::*;

    const FIG5_HIDDEN: &str = "[net]\nchannels=32\nheight=104\nwidth=104\n\n\
        [convolutional]\nfilters=64\nsize=3\nstride=1\nactivation=relu\nbinary=1\n\n\
        [maxpool]\nsize=2\nstride=2\n";

    const FIG5_OFFLOAD: &str = "[net]\nchannels=16\nheight=208\nwidth=208\n\n\
        [offload]\n# HW Interface Library\nlibrary=fabric.so\n# Subtopology & Trained Weights\n\
        network=tincy-yolo-offload.json\nweights=binparam-tincy-yolo/\n# Output Geometry\n\
        height=13\nwidth=13\nchannel=125\n";

    #[test]
    fn parses_hidden_layer_sections() {
        let net = parse_config(FIG5_HIDDEN).unwrap();
        assert_eq!(net.layers.len(), 2);
        let conv = net.layers[0].as_conv().unwrap();
        assert_eq!((conv.filters, conv.size, conv.stride), (64, 3, 1));
        assert_eq!(conv.activation, Activation::Relu);
        assert!(conv.binary);
        assert_eq!(net.layers[1], LayerDesc::Maxpool { size: 2, stride: 2 });
        assert_eq!(net.lines, vec![Some(6), Some(13)]);
    }

    #[test]
    fn parses_offload_section() {
        let net = parse_config(FIG5_OFFLOAD).unwrap();
        match &net.layers[0] {
            LayerDesc::Offload(o) => {
                assert_eq!(o.library, "fabric.so");
                assert_eq!(o.network, "tincy-yolo-offload.json");
                assert_eq!(o.weights, "binparam-tincy-yolo/");
                assert_eq!(o.out_dims(), (125, 13, 13));
                assert!(o.sub.is_none());
            }
            other => panic!("expected offload, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_has_no_net_section() {
        match parse_config("") {
            Err(Error::Config(msg)) => assert_eq!(msg, "no [net] section"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad_header = "[net]\nheight=4\nwidth=4\n[convolutional\nfilters=2\n";
        assert!(matches!(parse_config(bad_header), Err(Error::Parse { line: 4, .. })));

        let bad_number = "[net]\nheight=4\nwidth=4\n[convolutional]\nfilters=two\n";
        assert!(matches!(parse_config(bad_number), Err(Error::Parse { line: 5, .. })));

        // 3x3 kernel without padding on a 2x2 map breaks the chain
        let chain = "[net]\nheight=2\nwidth=2\n[convolutional]\nsize=3\nfilters=2\n";
        assert!(matches!(parse_config(chain), Err(Error::Parse { line: 4, .. })));

        let region = "[net]\nchannels=10\nheight=2\nwidth=2\n\n[region]\nclasses=20\nnum=5\n";
        assert!(matches!(parse_config(region), Err(Error::Parse { line: 6, .. })));
    }

    #[test]
    fn pad_flag_means_half_kernel() {
        let net = parse_config("[net]\nheight=8\nwidth=8\n[convolutional]\nsize=3\npad=1\nfilters=4\n").unwrap();
        assert_eq!(net.layers[0].as_conv().unwrap().pad, 1);
        assert_eq!(net.output_dims().unwrap(), (4, 8, 8));
    }

    #[test]
    fn sub_topology_round_trip_and_geometry() {
        let sub = SubTopology {
            input_scale: 0.5,
            ..SubTopology::new(vec![
                LayerDesc::Convolutional(ConvLayer::new(8, 3, 1, 1, Activation::Relu).binarized(3)),
                LayerDesc::Maxpool { size: 2, stride: 2 },
            ])
        };
        let text = serialize_sub_topology(&sub).unwrap();
        assert_eq!(parse_sub_topology(&text).unwrap(), sub);

        let mut net = parse_config(
            "[net]\nchannels=4\nheight=8\nwidth=8\n[offload]\nlibrary=x\nheight=4\nwidth=4\nchannel=8\n",
        )
        .unwrap();
        if let LayerDesc::Offload(o) = &mut net.layers[0] {
            o.sub = Some(sub.clone());
        }
        assert_eq!(net.output_dims().unwrap(), (8, 4, 4));
        if let LayerDesc::Offload(o) = &mut net.layers[0] {
            o.out_channels = 9;
        }
        assert!(net.shapes().is_err());
    }

    fn arb_conv() -> impl Strategy<Value = ConvLayer> {
        (
            1usize..64,
            prop::sample::select(vec![1usize, 3]),
            1usize..=2,
            prop::sample::select(vec![Activation::Linear, Activation::Relu, Activation::LeakyRelu]),
            0u8..3,
            1u8..=8,
            prop::sample::select(vec![16u32, 32]),
            0u32..6,
            prop::option::of(0.001f32..2.0),
        )
            .prop_map(|(filters, size, stride, act, mode, bits, acc, shift, scale)| {
                let mut c = ConvLayer::new(filters, size, stride, size / 2, act);
                match mode {
                    1 => c = c.binarized(bits),
                    2 => {
                        c = c.quantized(bits, 8);
                        c.accumulator = AccumulatorWidth::from_bits(acc).unwrap();
                        c.pre_shift = if acc == 16 { shift } else { 0 };
                        c.input_scale = scale;
                    }
                    _ => {}
                }
                c
            })
    }

    fn arb_layer() -> impl Strategy<Value = LayerDesc> {
        prop_oneof![
            arb_conv().prop_map(LayerDesc::Convolutional),
            (1usize..=3, 1usize..=2).prop_map(|(size, stride)| LayerDesc::Maxpool { size, stride }),
        ]
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(
            layers in prop::collection::vec(arb_layer(), 0..8),
            input in (1usize..8, 8usize..64, 8usize..64),
            offload in any::<bool>(),
        ) {
            let input: Dims = input;
            let mut net = NetworkConfig::new("prop", input, layers);
            if offload {
                net.layers.push(LayerDesc::Offload(OffloadDesc {
                    library: "fabric.so".into(),
                    network: "sub.json".into(),
                    weights: "params/".into(),
                    out_channels: 125,
                    out_height: 13,
                    out_width: 13,
                    sub: None,
                }));
            }
            prop_assume!(net.shapes().is_ok());
            let text = serialize_config(&net);
            let back = parse_config(&text).unwrap();
            prop_assert_eq!(back, net);
        }
    }
}

//! Offload layers: a host-side layer whose forward pass is handed to a
//! named backend, plus the built-in software model of the binary-weight
//! accelerator.
//!
//! A backend goes through `init` once, any number of `forward` calls, and
//! `teardown` once. [`OffloadLayer`] enforces that order and checks every
//! output against the dims declared in the config.

use std::any::Any;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::ConvSpec;
use crate::lowp::{binary_conv, maxpool_codes, BinaryWeightSet, QuantSpec, QuantTensor, ThresholdSet};
use crate::netcfg::{chain_dims, Dims, LayerDesc, LayerWeights, OffloadDesc, SubTopology};
use crate::tensor::FeatureMap;

/// Registry key of the built-in accelerator model.
pub const QNN_LIBRARY: &str = "fabric.so";

pub type BackendState = Box<dyn Any + Send>;

/// Everything a backend gets to build its state from.
#[derive(Debug, Clone, Copy)]
pub struct BackendSetup<'a> {
    pub sub: &'a SubTopology,
    /// Parameters of each sub-layer, parallel to `sub.layers`.
    pub weights: &'a [LayerWeights],
    pub input_dims: Dims,
    pub out_dims: Dims,
}

pub trait OffloadBackend: Send + Sync {
    fn name(&self) -> &str;
    fn init(&self, setup: &BackendSetup<'_>) -> Result<BackendState>;
    fn forward(&self, state: &mut BackendState, input: &FeatureMap) -> Result<FeatureMap>;
    fn teardown(&self, state: BackendState);
}

/// Library names to backends. Filled at startup, read-only afterwards.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    backends: HashMap<String, Arc<dyn OffloadBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding the built-in [`QnnBackend`].
    pub fn with_builtin() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(QnnBackend)).expect("empty registry");
        r
    }

    pub fn register(&mut self, backend: Arc<dyn OffloadBackend>) -> Result<()> {
        let name = backend.name().to_string();
        if self.backends.contains_key(&name) {
            return Err(Error::DuplicateBackend(name));
        }
        self.backends.insert(name, backend);
        Ok(())
    }

    /// Looks up `name`; `line` is the config line that asked for it.
    pub fn resolve(&self, name: &str, line: Option<usize>) -> Result<Arc<dyn OffloadBackend>> {
        self.backends
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnresolvedBackend {
                name: name.to_string(),
                line,
            })
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.backends.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendRegistry").field("backends", &self.names()).finish()
    }
}

/// One offload layer as the host engine sees it.
pub struct OffloadLayer {
    backend: Arc<dyn OffloadBackend>,
    state: Option<BackendState>,
    input_dims: Dims,
    out_dims: Dims,
}

impl std::fmt::Debug for OffloadLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OffloadLayer")
            .field("backend", &self.backend.name())
            .field("live", &self.state.is_some())
            .field("input_dims", &self.input_dims)
            .field("out_dims", &self.out_dims)
            .finish()
    }
}

/// Resolves the backend named by `desc` and runs its `init`.
pub fn make_offload_layer(
    desc: &OffloadDesc,
    input_dims: Dims,
    weights: &[LayerWeights],
    registry: &BackendRegistry,
    line: Option<usize>,
) -> Result<OffloadLayer> {
    let backend = registry.resolve(&desc.library, line)?;
    let sub = desc.sub.as_ref().ok_or_else(|| {
        Error::Config(format!("offload layer for {:?} has no sub-topology", desc.library))
    })?;
    let setup = BackendSetup {
        sub,
        weights,
        input_dims,
        out_dims: desc.out_dims(),
    };
    let state = backend.init(&setup)?;
    Ok(OffloadLayer {
        backend,
        state: Some(state),
        input_dims,
        out_dims: desc.out_dims(),
    })
}

impl OffloadLayer {
    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn out_dims(&self) -> Dims {
        self.out_dims
    }

    pub fn is_live(&self) -> bool {
        self.state.is_some()
    }

    pub fn forward(&mut self, input: &FeatureMap) -> Result<FeatureMap> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Contract("forward after teardown".into()))?;
        if input.dims() != self.input_dims {
            return Err(Error::Contract(format!(
                "offload input {:?}, expected {:?}",
                input.dims(),
                self.input_dims
            )));
        }
        let out = self.backend.forward(state, input)?;
        if out.dims() != self.out_dims {
            return Err(Error::Contract(format!(
                "backend {:?} returned {:?}, layer declares {:?}",
                self.backend.name(),
                out.dims(),
                self.out_dims
            )));
        }
        Ok(out)
    }

    /// Releases the backend state. Later calls are no-ops.
    pub fn teardown(&mut self) {
        if let Some(state) = self.state.take() {
            self.backend.teardown(state);
        }
    }
}

impl Drop for OffloadLayer {
    fn drop(&mut self) {
        self.teardown();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QnnOp {
    Conv {
        spec: ConvSpec,
        weights: BinaryWeightSet,
        thresholds: ThresholdSet,
    },
    Pool {
        size: usize,
        stride: usize,
    },
}

/// A validated sequence of binary convolutions and max-pools over codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QnnProgram {
    pub ops: Vec<QnnOp>,
    pub input_spec: QuantSpec,
    pub input_dims: Dims,
    pub out_dims: Dims,
}

impl QnnProgram {
    /// Checks the sub-topology geometry and parameters against `input_dims`.
    pub fn build(sub: &SubTopology, weights: &[LayerWeights], input_dims: Dims) -> Result<Self> {
        if weights.len() != sub.layers.len() {
            return Err(Error::Config(format!(
                "{} parameter sets for {} offloaded layers",
                weights.len(),
                sub.layers.len()
            )));
        }
        let shapes = chain_dims(&sub.layers, input_dims)
            .map_err(|(i, e)| Error::Config(format!("offloaded layer {}: {e}", i + 1)))?;
        let mut ops = Vec::with_capacity(sub.layers.len());
        for (i, ((layer, w), (din, _))) in sub.layers.iter().zip(weights).zip(&shapes).enumerate() {
            let op = match (layer, w) {
                (LayerDesc::Convolutional(c), LayerWeights::Binary { weights, thresholds }) if c.binary => {
                    if weights.in_channels() != din.0
                        || weights.out_channels() != c.filters
                        || weights.kernel() != c.size
                        || thresholds.channels() != c.filters
                        || thresholds.bits() != c.activation_bits
                    {
                        return Err(Error::Config(format!(
                            "offloaded layer {}: parameters do not match its geometry",
                            i + 1
                        )));
                    }
                    QnnOp::Conv {
                        spec: c.spec(),
                        weights: weights.clone(),
                        thresholds: thresholds.clone(),
                    }
                }
                (LayerDesc::Maxpool { size, stride }, _) => QnnOp::Pool {
                    size: *size,
                    stride: *stride,
                },
                _ => {
                    return Err(Error::Config(format!(
                        "offloaded layer {} must be a binary convolution or a max-pool",
                        i + 1
                    )))
                }
            };
            ops.push(op);
        }
        let input_spec = QuantSpec::unsigned_codes(sub.input_bits, sub.input_scale);
        input_spec.validate()?;
        Ok(Self {
            ops,
            input_spec,
            input_dims,
            out_dims: shapes.last().map(|s| s.1).unwrap_or(input_dims),
        })
    }

    /// Runs every op in turn, keeping each intermediate map.
    pub fn run_traced(&self, input: QuantTensor) -> Result<Vec<QuantTensor>> {
        let mut outs: Vec<QuantTensor> = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let cur = outs.last().unwrap_or(&input);
            let next = match op {
                QnnOp::Conv {
                    spec,
                    weights,
                    thresholds,
                } => binary_conv(cur, weights, spec, thresholds)?,
                QnnOp::Pool { size, stride } => maxpool_codes(cur, *size, *stride)?,
            };
            outs.push(next);
        }
        Ok(outs)
    }

    pub fn run(&self, input: QuantTensor) -> Result<QuantTensor> {
        Ok(self.run_traced(input.clone())?.pop().unwrap_or(input))
    }
}

/// Software model of the binary-weight accelerator. Takes a map of input
/// codes (already quantized by the stage in front of it) and returns the
/// final layer's codes; layers run one after another with each full map
/// materialized in between.
#[derive(Debug, Clone, Copy, Default)]
pub struct QnnBackend;

impl OffloadBackend for QnnBackend {
    fn name(&self) -> &str {
        QNN_LIBRARY
    }

    fn init(&self, setup: &BackendSetup<'_>) -> Result<BackendState> {
        let program = QnnProgram::build(setup.sub, setup.weights, setup.input_dims)
            .map_err(|e| Error::BackendInit(e.to_string()))?;
        if program.out_dims != setup.out_dims {
            return Err(Error::BackendInit(format!(
                "sub-topology yields {:?}, layer declares {:?}",
                program.out_dims, setup.out_dims
            )));
        }
        Ok(Box::new(program))
    }

    fn forward(&self, state: &mut BackendState, input: &FeatureMap) -> Result<FeatureMap> {
        let program = state
            .downcast_ref::<QnnProgram>()
            .ok_or_else(|| Error::Contract("foreign backend state".into()))?;
        let codes = QuantTensor::from_code_map(input, program.input_spec)?;
        Ok(program.run(codes)?.to_code_map())
    }

    fn teardown(&self, state: BackendState) {
        drop(state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    use crate::layers::Activation;
    use crate::lowp::quantize_unsigned;
    use crate::netcfg::{ConvLayer, NetworkWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[derive(Default)]
    struct Counting {
        inits: AtomicUsize,
        forwards: AtomicUsize,
        teardowns: AtomicUsize,
        wrong_dims: bool,
    }

    struct Stub(Arc<Counting>);

    impl OffloadBackend for Stub {
        fn name(&self) -> &str {
            "stub.so"
        }
        fn init(&self, setup: &BackendSetup<'_>) -> Result<BackendState> {
            self.0.inits.fetch_add(1, Ordering::SeqCst);
            Ok(Box::new(setup.out_dims))
        }
        fn forward(&self, state: &mut BackendState, _: &FeatureMap) -> Result<FeatureMap> {
            self.0.forwards.fetch_add(1, Ordering::SeqCst);
            let (c, h, w) = *state.downcast_ref::<Dims>().unwrap();
            FeatureMap::new(c, h, w + self.0.wrong_dims as usize)
        }
        fn teardown(&self, _: BackendState) {
            self.0.teardowns.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn stub_desc() -> OffloadDesc {
        OffloadDesc {
            library: "stub.so".into(),
            network: "n.json".into(),
            weights: "w".into(),
            out_channels: 125,
            out_height: 13,
            out_width: 13,
            sub: Some(SubTopology::new(Vec::new())),
        }
    }

    #[test]
    fn registry_semantics() {
        let mut r = BackendRegistry::with_builtin();
        assert_eq!(r.resolve("fabric.so", None).unwrap().name(), "fabric.so");
        assert!(matches!(
            r.register(Arc::new(QnnBackend)),
            Err(Error::DuplicateBackend(_))
        ));
        let err = r.resolve("gpu.so", Some(41)).err().unwrap();
        assert!(matches!(err, Error::UnresolvedBackend { line: Some(41), .. }));
        assert!(err.to_string().contains("line 41"));
    }

    #[test]
    fn life_cycle_is_counted() {
        let counts = Arc::new(Counting::default());
        let mut r = BackendRegistry::new();
        r.register(Arc::new(Stub(counts.clone()))).unwrap();
        {
            let mut layer = make_offload_layer(&stub_desc(), (16, 13, 13), &[], &r, None).unwrap();
            let input = FeatureMap::new(16, 13, 13).unwrap();
            assert_eq!(layer.forward(&input).unwrap().dims(), (125, 13, 13));
            layer.forward(&input).unwrap();
            layer.teardown();
            assert!(matches!(layer.forward(&input), Err(Error::Contract(_))));
            layer.teardown();
        }
        assert_eq!(counts.inits.load(Ordering::SeqCst), 1);
        assert_eq!(counts.forwards.load(Ordering::SeqCst), 2);
        assert_eq!(counts.teardowns.load(Ordering::SeqCst), 1);

        // dropped without explicit teardown
        drop(make_offload_layer(&stub_desc(), (16, 13, 13), &[], &r, None).unwrap());
        assert_eq!(counts.teardowns.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn wrong_output_dims_violate_the_contract() {
        let counts = Arc::new(Counting {
            wrong_dims: true,
            ..Default::default()
        });
        let mut r = BackendRegistry::new();
        r.register(Arc::new(Stub(counts))).unwrap();
        let mut layer = make_offload_layer(&stub_desc(), (16, 13, 13), &[], &r, None).unwrap();
        let err = layer.forward(&FeatureMap::new(16, 13, 13).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    fn random_codes(rng: &mut ChaCha8Rng, dims: Dims, bits: u8) -> FeatureMap {
        let hi = (1 << bits) - 1;
        let n = dims.0 * dims.1 * dims.2;
        FeatureMap::from_vec(dims.0, dims.1, dims.2, (0..n).map(|_| rng.gen_range(0..=hi) as f32).collect())
            .unwrap()
    }

    fn hidden_sub(widths: &[usize]) -> Vec<LayerDesc> {
        let mut layers = Vec::new();
        for (i, f) in widths.iter().enumerate() {
            layers.push(LayerDesc::Convolutional(
                ConvLayer::new(*f, 3, 1, 1, Activation::Relu).binarized(3),
            ));
            if i < 5 {
                layers.push(LayerDesc::Maxpool {
                    size: 2,
                    stride: if i == 4 { 1 } else { 2 },
                });
            }
        }
        layers
    }

    #[test]
    fn single_layer_matches_binary_conv() {
        let sub = SubTopology::new(vec![LayerDesc::Convolutional(
            ConvLayer::new(4, 1, 1, 0, Activation::Relu).binarized(3),
        )]);
        let net = crate::netcfg::NetworkConfig::new("s", (5, 6, 6), sub.layers.clone());
        let w = NetworkWeights::random(&net, 9).unwrap();
        let program = QnnProgram::build(&sub, &w.layers, (5, 6, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = random_codes(&mut rng, (5, 6, 6), 3);
        let q = QuantTensor::from_code_map(&fm, program.input_spec).unwrap();
        let LayerWeights::Binary { weights, thresholds } = &w.layers[0] else { unreachable!() };
        let direct = binary_conv(&q, weights, &sub.layers[0].as_conv().unwrap().spec(), thresholds).unwrap();
        assert_eq!(program.run(q).unwrap(), direct);
    }

    #[test]
    fn composition_matches_layer_by_layer() {
        let input = (16, 32, 32);
        let layers = hidden_sub(&[64, 64, 128, 256, 512, 512, 512]);
        assert_eq!(layers.len(), 12);
        let sub = SubTopology::new(layers.clone());
        let net = crate::netcfg::NetworkConfig::new("h", input, layers.clone());
        let out_dims = net.output_dims().unwrap();
        let w = NetworkWeights::random(&net, 5).unwrap();

        let backend = QnnBackend;
        let setup = BackendSetup {
            sub: &sub,
            weights: &w.layers,
            input_dims: input,
            out_dims,
        };
        let mut state = backend.init(&setup).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = random_codes(&mut rng, input, 3);
        let got = backend.forward(&mut state, &fm).unwrap();
        let again = backend.forward(&mut state, &fm).unwrap();
        assert_eq!(got, again);

        let mut cur = quantize_unsigned(&fm, 3, 1.0).unwrap();
        for (layer, lw) in layers.iter().zip(&w.layers) {
            cur = match (layer, lw) {
                (LayerDesc::Convolutional(c), LayerWeights::Binary { weights, thresholds }) => {
                    binary_conv(&cur, weights, &c.spec(), thresholds).unwrap()
                }
                (LayerDesc::Maxpool { size, stride }, _) => maxpool_codes(&cur, *size, *stride).unwrap(),
                _ => unreachable!(),
            };
        }
        assert_eq!(got, cur.to_code_map());
        backend.teardown(state);
    }

    #[test]
    fn geometry_mismatch_fails_at_init() {
        let layers = hidden_sub(&[8, 8]);
        let sub = SubTopology::new(layers.clone());
        let net = crate::netcfg::NetworkConfig::new("h", (4, 16, 16), layers);
        let w = NetworkWeights::random(&net, 1).unwrap();
        let setup = BackendSetup {
            sub: &sub,
            weights: &w.layers,
            input_dims: (5, 16, 16),
            out_dims: (8, 4, 4),
        };
        assert!(matches!(QnnBackend.init(&setup), Err(Error::BackendInit(_))));
    }

    #[test]
    fn rejects_non_code_input() {
        let sub = SubTopology::new(vec![LayerDesc::Maxpool { size: 2, stride: 2 }]);
        let setup = BackendSetup {
            sub: &sub,
            weights: &[LayerWeights::None],
            input_dims: (1, 2, 2),
            out_dims: (1, 1, 1),
        };
        let mut state = QnnBackend.init(&setup).unwrap();
        let fm = FeatureMap::from_vec(1, 2, 2, vec![0.5, 1.0, 2.0, 3.0]).unwrap();
        assert!(QnnBackend.forward(&mut state, &fm).is_err());
        let fm = FeatureMap::from_vec(1, 2, 2, vec![0.0, 1.0, 9.0, 3.0]).unwrap();
        assert!(QnnBackend.forward(&mut state, &fm).is_err());
    }
}

//! Quantized CNN inference for Tiny/Tincy YOLO style detectors.
//!
//! The crate covers the full-precision reference layers, the reduced
//! precision kernels (8-bit fused convolution, binary-weight engine), a
//! Darknet-style configuration loader with workload accounting, a generic
//! offload-layer mechanism, and a multi-worker frame pipeline.

pub mod cli;
pub mod detect;
pub mod error;
pub mod image;
pub mod layers;
pub mod lowp;
pub mod netcfg;
pub mod offload;
pub mod pipeline;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Matrix};

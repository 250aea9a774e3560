//! ONNX-to-dataflow toolchain.
//!
//! The flow runs in stages, each in its own module:
//!
//! * [`onnx`] decodes ONNX protobuf files (or their JSON mirror) into a raw graph;
//! * [`ir`] lowers the graph to a linear chain of layers with inferred shapes;
//! * [`quant`] applies `Dx-Wy` post-training fixed-point quantization;
//! * [`sim`] maps the quantized model onto a streaming actor network and runs it bit-accurately;
//! * [`compose`] merges several dataflows into one reconfigurable multi-dataflow;
//! * [`codegen`] writes HLS-style sources, a build script and an XDF topology;
//! * [`explore`] sweeps datatypes and tabulates accuracy, footprint and cycle counts.

pub mod cli;
pub mod codegen;
pub mod compose;
pub mod error;
pub mod explore;
pub mod ir;
pub mod mnist;
pub mod onnx;
pub mod quant;
pub mod sim;
pub mod testing;

pub use error::{Error, Result};

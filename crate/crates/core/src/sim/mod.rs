//! Bit-accurate streaming dataflow simulation.
//!
//! A [`QuantizedModel`](crate::quant::QuantizedModel) is mapped by
//! [`build_dataflow`] onto actors connected by bounded FIFOs and executed
//! with [`run_image`] / [`run_stream`]. [`reference_inference`] evaluates the
//! same model with plain nested loops and must agree bit for bit.

pub mod arith;
pub mod engine;
pub mod graph;
pub mod reference;
pub mod window;

use thiserror::Error;

pub use arith::{accumulator_bits, mac, requantize, MacFormats};
pub use engine::{run_image, run_stream, ChannelLedger, Schedule, SimulationMetrics, Simulator, StreamResult, Token};
pub use graph::{
    build_dataflow, Actor, ActorKind, ActorSkeleton, Channel, Connection, DataflowGraph, GraphBuilder, GraphSkeleton,
    DEFAULT_FIFO_CAPACITY,
};
pub use reference::{argmax, float_inference, quantized_activations, reference_inference};
pub use window::{WindowAssembler, WindowGeometry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("deadlock: no actor can fire and outputs are incomplete; channel occupancy: {dump}")]
    DeadlockDetected { dump: String },
    #[error("input has {actual} values, graph expects {expected}")]
    InputLength { expected: usize, actual: usize },
    #[error("invalid dataflow graph: {0}")]
    InvalidGraph(String),
    #[error("no images to stream")]
    NoImages,
}

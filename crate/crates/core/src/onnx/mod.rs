//! ONNX ingestion.
//!
//! Two front ends produce the same [`RawModel`]: the binary protobuf decoder
//! ([`decode_onnx`]) and a JSON mirror used for hand-written fixtures
//! ([`decode_json_mirror`]). Both run the same semantic validation, so a model
//! that decodes through either path is topologically well formed and only uses
//! the supported operator subset.

mod binary;
mod mirror;
pub(crate) mod wire;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use binary::{decode_onnx, encode_onnx};
pub use mirror::{decode_json_mirror, encode_json_mirror};

/// Opset assumed when a model carries no `opset_import` for the default domain.
pub const DEFAULT_OPSET: i64 = 13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("malformed ONNX file: {0}")]
    MalformedFile(String),
    #[error("unsupported operator: {0}")]
    UnsupportedOperator(String),
    #[error("unsupported tensor type for initializer '{0}' (only float32 is accepted)")]
    UnsupportedTensorType(String),
    #[error("input '{0}' does not resolve to a graph input, initializer or earlier node output")]
    DanglingInput(String),
    #[error("output name '{0}' produced more than once")]
    DuplicateOutput(String),
    #[error("initializer '{name}' has {actual} payload bytes, expected {expected}")]
    PayloadLength {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("schema violation at {0}")]
    SchemaViolation(String),
}

/// The operator subset understood by the toolchain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpType {
    Conv,
    Relu,
    MaxPool,
    BatchNormalization,
    Gemm,
    MatMul,
    Add,
    Flatten,
    Reshape,
}

impl OpType {
    pub const ALL: [OpType; 9] = [
        OpType::Conv,
        OpType::Relu,
        OpType::MaxPool,
        OpType::BatchNormalization,
        OpType::Gemm,
        OpType::MatMul,
        OpType::Add,
        OpType::Flatten,
        OpType::Reshape,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpType::Conv => "Conv",
            OpType::Relu => "Relu",
            OpType::MaxPool => "MaxPool",
            OpType::BatchNormalization => "BatchNormalization",
            OpType::Gemm => "Gemm",
            OpType::MatMul => "MatMul",
            OpType::Add => "Add",
            OpType::Flatten => "Flatten",
            OpType::Reshape => "Reshape",
        }
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpType {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpType::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| IngestError::UnsupportedOperator(s.to_string()))
    }
}

/// A float32 tensor: row-major payload plus dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f32),
    Ints(Vec<i64>),
    Floats(Vec<f32>),
    Text(String),
    Tensor(FloatTensor),
}

impl AttrValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f32> {
        match self {
            AttrValue::Float(v) => Some(*v),
            AttrValue::Int(v) => Some(*v as f32),
            _ => None,
        }
    }

    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            AttrValue::Ints(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawNode {
    pub op_type: OpType,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: BTreeMap<String, AttrValue>,
}

impl RawNode {
    pub fn new(op_type: OpType, inputs: &[&str], outputs: &[&str]) -> Self {
        Self {
            op_type,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, name: &str, value: AttrValue) -> Self {
        self.attributes.insert(name.to_string(), value);
        self
    }

    pub fn attr(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.get(name)
    }
}

/// Named value with a (possibly symbolic, encoded as -1) shape.
pub type ValueInfo = (String, Vec<i64>);

/// A decoded ONNX graph before layer-IR construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawModel {
    pub graph_name: String,
    pub nodes: Vec<RawNode>,
    pub initializers: BTreeMap<String, FloatTensor>,
    pub graph_inputs: Vec<ValueInfo>,
    pub graph_outputs: Vec<ValueInfo>,
    pub opset_version: i64,
}

impl RawModel {
    pub fn empty(graph_name: &str) -> Self {
        Self {
            graph_name: graph_name.to_string(),
            nodes: Vec::new(),
            initializers: BTreeMap::new(),
            graph_inputs: Vec::new(),
            graph_outputs: Vec::new(),
            opset_version: DEFAULT_OPSET,
        }
    }

    /// Graph inputs that are not initializers (the activation inputs).
    pub fn data_inputs(&self) -> impl Iterator<Item = &ValueInfo> {
        self.graph_inputs
            .iter()
            .filter(|(name, _)| !self.initializers.contains_key(name))
    }

    /// Checks the structural invariants shared by both decoders.
    pub fn validate(&self) -> Result<(), IngestError> {
        for (name, t) in &self.initializers {
            if t.data.len() != t.element_count() {
                return Err(IngestError::PayloadLength {
                    name: name.clone(),
                    expected: 4 * t.element_count(),
                    actual: 4 * t.data.len(),
                });
            }
        }
        let mut known: HashSet<&str> = self.graph_inputs.iter().map(|(n, _)| n.as_str()).collect();
        known.extend(self.initializers.keys().map(String::as_str));
        let mut produced: HashSet<&str> = HashSet::new();
        for node in &self.nodes {
            for input in &node.inputs {
                // empty names mark omitted optional inputs
                if !input.is_empty() && !known.contains(input.as_str()) {
                    return Err(IngestError::DanglingInput(input.clone()));
                }
            }
            for output in &node.outputs {
                if !produced.insert(output.as_str()) {
                    return Err(IngestError::DuplicateOutput(output.clone()));
                }
                known.insert(output.as_str());
            }
        }
        for (name, _) in &self.graph_outputs {
            if !known.contains(name.as_str()) {
                return Err(IngestError::DanglingInput(name.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_type_round_trips_through_strings() {
        for op in OpType::ALL {
            assert_eq!(op.as_str().parse::<OpType>().unwrap(), op);
        }
        assert_eq!(
            "LSTM".parse::<OpType>(),
            Err(IngestError::UnsupportedOperator("LSTM".into()))
        );
    }

    #[test]
    fn dangling_input_is_reported() {
        let mut m = RawModel::empty("g");
        m.graph_inputs.push(("x".into(), vec![1, 4]));
        m.nodes.push(RawNode::new(OpType::Relu, &["y"], &["z"]));
        assert_eq!(m.validate(), Err(IngestError::DanglingInput("y".into())));
    }

    #[test]
    fn duplicate_outputs_are_rejected() {
        let mut m = RawModel::empty("g");
        m.graph_inputs.push(("x".into(), vec![1, 4]));
        m.nodes.push(RawNode::new(OpType::Relu, &["x"], &["y"]));
        m.nodes.push(RawNode::new(OpType::Relu, &["y"], &["y"]));
        assert_eq!(m.validate(), Err(IngestError::DuplicateOutput("y".into())));
    }

    #[test]
    fn payload_length_must_match_shape() {
        let mut m = RawModel::empty("g");
        m.initializers
            .insert("w".into(), FloatTensor::new(vec![2, 2], vec![0.0; 3]));
        assert!(matches!(m.validate(), Err(IngestError::PayloadLength { expected: 16, actual: 12, .. })));
    }
}

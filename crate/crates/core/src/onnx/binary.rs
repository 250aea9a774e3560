//! Binary ONNX (protobuf) decoding and encoding for the supported subset.
//!
//! Field numbers follow `onnx.proto`: ModelProto.graph = 7, opset_import = 8;
//! GraphProto.node = 1, name = 2, initializer = 5, input = 11, output = 12;
//! NodeProto.input = 1, output = 2, op_type = 4, attribute = 5, domain = 7;
//! TensorProto.dims = 1, data_type = 2, float_data = 4, name = 8, raw_data = 9,
//! data_location = 14.

use std::collections::BTreeMap;

use super::wire::{Reader, Value, Writer};
use super::{AttrValue, FloatTensor, IngestError, OpType, RawModel, RawNode, ValueInfo, DEFAULT_OPSET};

const TENSOR_FLOAT: i64 = 1;
const DATA_LOCATION_EXTERNAL: i64 = 1;

const ATTR_FLOAT: i64 = 1;
const ATTR_INT: i64 = 2;
const ATTR_STRING: i64 = 3;
const ATTR_TENSOR: i64 = 4;
const ATTR_FLOATS: i64 = 6;
const ATTR_INTS: i64 = 7;

fn malformed(msg: impl Into<String>) -> IngestError {
    IngestError::MalformedFile(msg.into())
}

/// Decodes a serialized ONNX model holding exactly one graph.
pub fn decode_onnx(bytes: &[u8]) -> Result<RawModel, IngestError> {
    let mut r = Reader::new(bytes);
    let mut graph = None;
    let mut opset = None;
    while !r.is_empty() {
        match r.field()? {
            (7, v) => {
                if graph.is_some() {
                    return Err(malformed("model contains more than one graph"));
                }
                graph = Some(v.bytes("ModelProto.graph")?);
            }
            (8, v) => {
                let (domain, version) = decode_opset(v.bytes("ModelProto.opset_import")?)?;
                if domain.is_empty() || domain == "ai.onnx" {
                    opset = Some(version);
                }
            }
            _ => {}
        }
    }
    let graph = graph.ok_or_else(|| malformed("model has no graph"))?;
    let mut model = decode_graph(graph)?;
    model.opset_version = opset.unwrap_or(DEFAULT_OPSET);
    model.validate()?;
    Ok(model)
}

fn decode_opset(buf: &[u8]) -> Result<(String, i64), IngestError> {
    let mut r = Reader::new(buf);
    let mut domain = String::new();
    let mut version = 0;
    while !r.is_empty() {
        match r.field()? {
            (1, v) => domain = v.string("OperatorSetIdProto.domain")?,
            (2, v) => version = v.int("OperatorSetIdProto.version")?,
            _ => {}
        }
    }
    Ok((domain, version))
}

fn decode_graph(buf: &[u8]) -> Result<RawModel, IngestError> {
    let mut r = Reader::new(buf);
    let mut model = RawModel::empty("");
    while !r.is_empty() {
        match r.field()? {
            (1, v) => model.nodes.push(decode_node(v.bytes("GraphProto.node")?)?),
            (2, v) => model.graph_name = v.string("GraphProto.name")?,
            (5, v) => {
                let (name, t) = decode_tensor(v.bytes("GraphProto.initializer")?)?;
                model.initializers.insert(name, t);
            }
            (11, v) => model.graph_inputs.push(decode_value_info(v.bytes("GraphProto.input")?)?),
            (12, v) => model.graph_outputs.push(decode_value_info(v.bytes("GraphProto.output")?)?),
            (15, v) => {
                // sparse initializers carry their own tensor; report its name when present
                let name = sparse_name(v.bytes("GraphProto.sparse_initializer")?)?;
                return Err(IngestError::UnsupportedTensorType(name));
            }
            _ => {}
        }
    }
    Ok(model)
}

fn sparse_name(buf: &[u8]) -> Result<String, IngestError> {
    let mut r = Reader::new(buf);
    while !r.is_empty() {
        if let (1, v) = r.field()? {
            return Ok(decode_tensor_header(v.bytes("SparseTensorProto.values")?)?.0);
        }
    }
    Ok(String::from("<sparse>"))
}

fn decode_node(buf: &[u8]) -> Result<RawNode, IngestError> {
    let mut r = Reader::new(buf);
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut op_type = String::new();
    let mut domain = String::new();
    let mut attributes = BTreeMap::new();
    while !r.is_empty() {
        match r.field()? {
            (1, v) => inputs.push(v.string("NodeProto.input")?),
            (2, v) => outputs.push(v.string("NodeProto.output")?),
            (4, v) => op_type = v.string("NodeProto.op_type")?,
            (5, v) => {
                let (name, value) = decode_attribute(v.bytes("NodeProto.attribute")?)?;
                attributes.insert(name, value);
            }
            (7, v) => domain = v.string("NodeProto.domain")?,
            _ => {}
        }
    }
    if !(domain.is_empty() || domain == "ai.onnx") {
        return Err(IngestError::UnsupportedOperator(format!("{domain}::{op_type}")));
    }
    Ok(RawNode {
        op_type: op_type.parse::<OpType>()?,
        inputs,
        outputs,
        attributes,
    })
}

fn decode_attribute(buf: &[u8]) -> Result<(String, AttrValue), IngestError> {
    let mut r = Reader::new(buf);
    let mut name = String::new();
    let mut declared = 0;
    let mut f = None;
    let mut i = None;
    let mut s = None;
    let mut t = None;
    let mut floats = Vec::new();
    let mut ints = Vec::new();
    let mut saw_floats = false;
    let mut saw_ints = false;
    let mut other = None;
    while !r.is_empty() {
        match r.field()? {
            (1, v) => name = v.string("AttributeProto.name")?,
            (20, v) => declared = v.int("AttributeProto.type")?,
            (2, Value::Fixed32(bits)) => f = Some(f32::from_bits(bits)),
            (3, v) => i = Some(v.int("AttributeProto.i")?),
            (4, v) => s = Some(v.string("AttributeProto.s")?),
            (5, v) => t = Some(decode_tensor(v.bytes("AttributeProto.t")?)?.1),
            (7, v) => {
                saw_floats = true;
                v.push_floats(&mut floats, "AttributeProto.floats")?;
            }
            (8, v) => {
                saw_ints = true;
                v.push_ints(&mut ints, "AttributeProto.ints")?;
            }
            (field @ (6 | 9 | 10 | 11 | 14 | 15 | 22 | 23), _) => other = Some(field),
            _ => {}
        }
    }
    let inferred = if declared != 0 {
        declared
    } else if t.is_some() {
        ATTR_TENSOR
    } else if saw_floats {
        ATTR_FLOATS
    } else if saw_ints {
        ATTR_INTS
    } else if s.is_some() {
        ATTR_STRING
    } else if f.is_some() {
        ATTR_FLOAT
    } else if i.is_some() {
        ATTR_INT
    } else if let Some(field) = other {
        return Err(malformed(format!("attribute '{name}' uses unsupported field {field}")));
    } else {
        return Err(malformed(format!("attribute '{name}' carries no value")));
    };
    let value = match inferred {
        ATTR_FLOAT => AttrValue::Float(f.unwrap_or(0.0)),
        ATTR_INT => AttrValue::Int(i.unwrap_or(0)),
        ATTR_STRING => AttrValue::Text(s.unwrap_or_default()),
        ATTR_TENSOR => AttrValue::Tensor(
            t.ok_or_else(|| malformed(format!("tensor attribute '{name}' has no tensor")))?,
        ),
        ATTR_FLOATS => AttrValue::Floats(floats),
        ATTR_INTS => AttrValue::Ints(ints),
        other => return Err(malformed(format!("attribute '{name}' has unsupported type {other}"))),
    };
    Ok((name, value))
}

struct TensorHeader<'a> {
    dims: Vec<i64>,
    data_type: i64,
    raw: Option<&'a [u8]>,
    float_data: Vec<f32>,
    external: bool,
}

fn decode_tensor_header(buf: &[u8]) -> Result<(String, TensorHeader<'_>), IngestError> {
    let mut r = Reader::new(buf);
    let mut name = String::new();
    let mut h = TensorHeader {
        dims: Vec::new(),
        data_type: 0,
        raw: None,
        float_data: Vec::new(),
        external: false,
    };
    while !r.is_empty() {
        match r.field()? {
            (1, v) => v.push_ints(&mut h.dims, "TensorProto.dims")?,
            (2, v) => h.data_type = v.int("TensorProto.data_type")?,
            (4, v) => v.push_floats(&mut h.float_data, "TensorProto.float_data")?,
            (8, v) => name = v.string("TensorProto.name")?,
            (9, v) => h.raw = Some(v.bytes("TensorProto.raw_data")?),
            (14, v) => h.external = v.int("TensorProto.data_location")? == DATA_LOCATION_EXTERNAL,
            _ => {}
        }
    }
    Ok((name, h))
}

fn decode_tensor(buf: &[u8]) -> Result<(String, FloatTensor), IngestError> {
    let (name, h) = decode_tensor_header(buf)?;
    if h.data_type != TENSOR_FLOAT || h.external {
        return Err(IngestError::UnsupportedTensorType(name));
    }
    let shape = h
        .dims
        .iter()
        .map(|&d| usize::try_from(d).map_err(|_| malformed(format!("tensor '{name}' has negative dimension"))))
        .collect::<Result<Vec<_>, _>>()?;
    let count: usize = shape.iter().product();
    let data = match h.raw {
        Some(raw) => {
            if raw.len() != 4 * count {
                return Err(IngestError::PayloadLength {
                    name,
                    expected: 4 * count,
                    actual: raw.len(),
                });
            }
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        None => h.float_data,
    };
    if data.len() != count {
        return Err(IngestError::PayloadLength {
            name,
            expected: 4 * count,
            actual: 4 * data.len(),
        });
    }
    Ok((name, FloatTensor { shape, data }))
}

fn decode_value_info(buf: &[u8]) -> Result<ValueInfo, IngestError> {
    let mut r = Reader::new(buf);
    let mut name = String::new();
    let mut dims = Vec::new();
    while !r.is_empty() {
        match r.field()? {
            (1, v) => name = v.string("ValueInfoProto.name")?,
            (2, v) => dims = decode_type_dims(v.bytes("ValueInfoProto.type")?)?,
            _ => {}
        }
    }
    Ok((name, dims))
}

/// TypeProto.tensor_type(1) -> shape(2) -> dim(1) -> dim_value(1) | dim_param(2).
fn decode_type_dims(buf: &[u8]) -> Result<Vec<i64>, IngestError> {
    let mut dims = Vec::new();
    let mut r = Reader::new(buf);
    while !r.is_empty() {
        let (1, tensor_type) = r.field()? else { continue };
        let mut tr = Reader::new(tensor_type.bytes("TypeProto.tensor_type")?);
        while !tr.is_empty() {
            let (2, shape) = tr.field()? else { continue };
            let mut sr = Reader::new(shape.bytes("TypeProto.Tensor.shape")?);
            while !sr.is_empty() {
                let (1, dim) = sr.field()? else { continue };
                let mut dr = Reader::new(dim.bytes("TensorShapeProto.dim")?);
                let mut value = -1;
                while !dr.is_empty() {
                    if let (1, v) = dr.field()? {
                        value = v.int("Dimension.dim_value")?;
                    }
                }
                dims.push(value);
            }
        }
    }
    Ok(dims)
}

/// Serializes a model into the ONNX wire format (IR version 8).
pub fn encode_onnx(model: &RawModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.varint(1, 8);
    w.string(2, "onnx2hls");
    w.message(7, |g| {
        for node in &model.nodes {
            g.message(1, |n| encode_node(n, node));
        }
        g.string(2, &model.graph_name);
        for (name, t) in &model.initializers {
            g.message(5, |tw| encode_tensor(tw, name, t));
        }
        for vi in &model.graph_inputs {
            g.message(11, |v| encode_value_info(v, vi));
        }
        for vi in &model.graph_outputs {
            g.message(12, |v| encode_value_info(v, vi));
        }
    });
    w.message(8, |o| o.varint(2, model.opset_version));
    w.into_bytes()
}

fn encode_node(w: &mut Writer, node: &RawNode) {
    for i in &node.inputs {
        w.string(1, i);
    }
    for o in &node.outputs {
        w.string(2, o);
    }
    w.string(4, node.op_type.as_str());
    for (name, value) in &node.attributes {
        w.message(5, |a| {
            a.string(1, name);
            match value {
                AttrValue::Float(f) => {
                    a.fixed32(2, f.to_bits());
                    a.varint(20, ATTR_FLOAT);
                }
                AttrValue::Int(i) => {
                    a.varint(3, *i);
                    a.varint(20, ATTR_INT);
                }
                AttrValue::Text(s) => {
                    a.string(4, s);
                    a.varint(20, ATTR_STRING);
                }
                AttrValue::Tensor(t) => {
                    a.message(5, |tw| encode_tensor(tw, "", t));
                    a.varint(20, ATTR_TENSOR);
                }
                AttrValue::Floats(fs) => {
                    for f in fs {
                        a.fixed32(7, f.to_bits());
                    }
                    a.varint(20, ATTR_FLOATS);
                }
                AttrValue::Ints(is) => {
                    a.packed_ints(8, is);
                    a.varint(20, ATTR_INTS);
                }
            }
        });
    }
}

fn encode_tensor(w: &mut Writer, name: &str, t: &FloatTensor) {
    let dims: Vec<i64> = t.shape.iter().map(|&d| d as i64).collect();
    w.packed_ints(1, &dims);
    w.varint(2, TENSOR_FLOAT);
    w.string(8, name);
    let raw: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    w.bytes(9, &raw);
}

fn encode_value_info(w: &mut Writer, (name, dims): &ValueInfo) {
    w.string(1, name);
    w.message(2, |ty| {
        ty.message(1, |tt| {
            tt.varint(1, TENSOR_FLOAT);
            tt.message(2, |shape| {
                for &d in dims {
                    shape.message(1, |dim| {
                        if d >= 0 {
                            dim.varint(1, d);
                        } else {
                            dim.string(2, "N");
                        }
                    });
                }
            });
        });
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_conv() -> RawModel {
        let mut m = RawModel::empty("single_conv");
        m.graph_inputs.push(("x".into(), vec![1, 1, 28, 28]));
        m.graph_outputs.push(("y".into(), vec![1, 16, 26, 26]));
        m.initializers.insert(
            "w".into(),
            FloatTensor::new(vec![16, 1, 3, 3], (0..144).map(|i| i as f32 / 144.0).collect()),
        );
        m.nodes.push(
            RawNode::new(OpType::Conv, &["x", "w"], &["y"])
                .with_attr("kernel_shape", AttrValue::Ints(vec![3, 3]))
                .with_attr("strides", AttrValue::Ints(vec![1, 1])),
        );
        m
    }

    #[test]
    fn single_conv_decodes() {
        let m = decode_onnx(&encode_onnx(&single_conv())).unwrap();
        assert_eq!(m.nodes.len(), 1);
        assert_eq!(m.initializers.len(), 1);
        assert_eq!(m.initializers["w"].shape, vec![16, 1, 3, 3]);
        assert_eq!(m, single_conv());
    }

    #[test]
    fn unknown_operator_is_rejected() {
        let mut w = Writer::new();
        w.message(7, |g| {
            g.message(1, |n| {
                n.string(1, "x");
                n.string(2, "y");
                n.string(4, "LSTM");
            });
            g.message(11, |v| v.string(1, "x"));
        });
        assert_eq!(
            decode_onnx(&w.into_bytes()),
            Err(IngestError::UnsupportedOperator("LSTM".into()))
        );
    }

    #[test]
    fn non_float_initializer_is_rejected() {
        let mut w = Writer::new();
        w.message(7, |g| {
            g.message(5, |t| {
                t.packed_ints(1, &[2]);
                t.varint(2, 7);
                t.string(8, "shape");
                t.bytes(9, &[0; 16]);
            });
        });
        assert_eq!(
            decode_onnx(&w.into_bytes()),
            Err(IngestError::UnsupportedTensorType("shape".into()))
        );
    }

    #[test]
    fn float_data_field_is_accepted() {
        let mut w = Writer::new();
        w.message(7, |g| {
            g.message(5, |t| {
                t.packed_ints(1, &[2]);
                t.varint(2, 1);
                t.string(8, "b");
                t.fixed32(4, 1.5f32.to_bits());
                t.fixed32(4, (-2.0f32).to_bits());
            });
        });
        let m = decode_onnx(&w.into_bytes()).unwrap();
        assert_eq!(m.initializers["b"].data, vec![1.5, -2.0]);
    }

    #[test]
    fn missing_graph_or_garbage_is_malformed() {
        assert!(matches!(decode_onnx(&[]), Err(IngestError::MalformedFile(_))));
        assert!(matches!(
            decode_onnx(&[0x3a, 0x10, 0x00]),
            Err(IngestError::MalformedFile(_))
        ));
    }

    #[test]
    fn short_raw_data_is_a_payload_error() {
        let mut w = Writer::new();
        w.message(7, |g| {
            g.message(5, |t| {
                t.packed_ints(1, &[4]);
                t.varint(2, 1);
                t.string(8, "w");
                t.bytes(9, &[0; 12]);
            });
        });
        assert!(matches!(
            decode_onnx(&w.into_bytes()),
            Err(IngestError::PayloadLength { expected: 16, actual: 12, .. })
        ));
    }
}

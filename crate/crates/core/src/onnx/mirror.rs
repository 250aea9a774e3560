//! JSON mirror of the binary model format.
//!
//! ```json
//! {"graph_name": "g", "opset_version": 13,
//!  "nodes": [{"op_type": "Relu", "inputs": ["x"], "outputs": ["y"], "attributes": {}}],
//!  "initializers": {"w": {"shape": [2], "data": [0.5, -1.0]}},
//!  "inputs": [["x", [1, 4]]], "outputs": [["y", [1, 4]]]}
//! ```
//!
//! Attribute values: JSON integers are `Int`, other numbers `Float`, integer
//! arrays `Ints`; `{"floats": [...]}`, `{"string": "..."}` and
//! `{"tensor": {"shape": [...], "data": [...]}}` cover the remaining kinds.
//! `graph_name` and `opset_version` are optional.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use super::{AttrValue, FloatTensor, IngestError, OpType, RawModel, RawNode, ValueInfo, DEFAULT_OPSET};

fn violation(path: impl Into<String>) -> IngestError {
    IngestError::SchemaViolation(path.into())
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, IngestError> {
    obj.get(key).ok_or_else(|| violation(join(path, key)))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, IngestError> {
    v.as_object().ok_or_else(|| violation(path))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, IngestError> {
    v.as_array().ok_or_else(|| violation(path))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, IngestError> {
    v.as_str().ok_or_else(|| violation(path))
}

fn string_list(v: &Value, path: &str) -> Result<Vec<String>, IngestError> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, s)| as_str(s, &format!("{path}[{i}]")).map(str::to_string))
        .collect()
}

fn int_list(v: &Value, path: &str) -> Result<Vec<i64>, IngestError> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, d)| d.as_i64().ok_or_else(|| violation(format!("{path}[{i}]"))))
        .collect()
}

fn float_list(v: &Value, path: &str) -> Result<Vec<f32>, IngestError> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| violation(format!("{path}[{i}]")))
        })
        .collect()
}

fn tensor(v: &Value, path: &str) -> Result<FloatTensor, IngestError> {
    let obj = as_object(v, path)?;
    let shape_path = join(path, "shape");
    let shape = int_list(field(obj, "shape", path)?, &shape_path)?
        .into_iter()
        .map(|d| usize::try_from(d).map_err(|_| violation(shape_path.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let data = float_list(field(obj, "data", path)?, &join(path, "data"))?;
    Ok(FloatTensor { shape, data })
}

fn value_infos(v: &Value, path: &str) -> Result<Vec<ValueInfo>, IngestError> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let p = format!("{path}[{i}]");
            let pair = as_array(pair, &p)?;
            if pair.len() != 2 {
                return Err(violation(p));
            }
            Ok((
                as_str(&pair[0], &format!("{p}[0]"))?.to_string(),
                int_list(&pair[1], &format!("{p}[1]"))?,
            ))
        })
        .collect()
}

fn attribute(v: &Value, path: &str) -> Result<AttrValue, IngestError> {
    match v {
        Value::Number(n) => match n.as_i64() {
            Some(i) if !n.is_f64() => Ok(AttrValue::Int(i)),
            _ => Ok(AttrValue::Float(n.as_f64().ok_or_else(|| violation(path))? as f32)),
        },
        Value::Array(_) => Ok(AttrValue::Ints(int_list(v, path)?)),
        Value::Object(obj) if obj.len() == 1 => {
            let (key, inner) = obj.iter().next().unwrap();
            let p = join(path, key);
            match key.as_str() {
                "floats" => Ok(AttrValue::Floats(float_list(inner, &p)?)),
                "string" => Ok(AttrValue::Text(as_str(inner, &p)?.to_string())),
                "tensor" => Ok(AttrValue::Tensor(tensor(inner, &p)?)),
                _ => Err(violation(p)),
            }
        }
        _ => Err(violation(path)),
    }
}

fn node(v: &Value, path: &str) -> Result<RawNode, IngestError> {
    let obj = as_object(v, path)?;
    let op = as_str(field(obj, "op_type", path)?, &join(path, "op_type"))?;
    let op_type = op.parse::<OpType>()?;
    let inputs = string_list(field(obj, "inputs", path)?, &join(path, "inputs"))?;
    let outputs = string_list(field(obj, "outputs", path)?, &join(path, "outputs"))?;
    let mut attributes = BTreeMap::new();
    if let Some(attrs) = obj.get("attributes") {
        let attrs_path = join(path, "attributes");
        for (name, value) in as_object(attrs, &attrs_path)? {
            attributes.insert(name.clone(), attribute(value, &join(&attrs_path, name))?);
        }
    }
    Ok(RawNode {
        op_type,
        inputs,
        outputs,
        attributes,
    })
}

/// Decodes the JSON mirror and applies the same validation as the binary path.
pub fn decode_json_mirror(text: &str) -> Result<RawModel, IngestError> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| violation(format!("<document> ({e})")))?;
    let obj = as_object(&root, "<root>")?;

    let nodes = as_array(field(obj, "nodes", "")?, "nodes")?
        .iter()
        .enumerate()
        .map(|(i, n)| node(n, &format!("nodes[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;

    let mut initializers = BTreeMap::new();
    for (name, t) in as_object(field(obj, "initializers", "")?, "initializers")? {
        initializers.insert(name.clone(), tensor(t, &format!("initializers.{name}"))?);
    }

    let graph_name = match obj.get("graph_name") {
        Some(v) => as_str(v, "graph_name")?.to_string(),
        None => String::new(),
    };
    let opset_version = match obj.get("opset_version") {
        Some(v) => v.as_i64().ok_or_else(|| violation("opset_version"))?,
        None => DEFAULT_OPSET,
    };

    let model = RawModel {
        graph_name,
        nodes,
        initializers,
        graph_inputs: value_infos(field(obj, "inputs", "")?, "inputs")?,
        graph_outputs: value_infos(field(obj, "outputs", "")?, "outputs")?,
        opset_version,
    };
    model.validate()?;
    Ok(model)
}

fn tensor_json(t: &FloatTensor) -> Value {
    json!({
        "shape": t.shape,
        "data": t.data.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
    })
}

fn attribute_json(v: &AttrValue) -> Value {
    match v {
        AttrValue::Int(i) => json!(i),
        AttrValue::Float(f) => json!(f64::from(*f)),
        AttrValue::Ints(is) => json!(is),
        AttrValue::Floats(fs) => json!({ "floats": fs.iter().map(|&f| f64::from(f)).collect::<Vec<_>>() }),
        AttrValue::Text(s) => json!({ "string": s }),
        AttrValue::Tensor(t) => json!({ "tensor": tensor_json(t) }),
    }
}

/// Canonical JSON text for a model; keys are emitted in sorted order.
pub fn encode_json_mirror(model: &RawModel) -> String {
    let nodes: Vec<Value> = model
        .nodes
        .iter()
        .map(|n| {
            let attrs: Map<String, Value> = n
                .attributes
                .iter()
                .map(|(k, v)| (k.clone(), attribute_json(v)))
                .collect();
            json!({
                "op_type": n.op_type.as_str(),
                "inputs": n.inputs,
                "outputs": n.outputs,
                "attributes": attrs,
            })
        })
        .collect();
    let inits: Map<String, Value> = model
        .initializers
        .iter()
        .map(|(k, t)| (k.clone(), tensor_json(t)))
        .collect();
    let doc = json!({
        "graph_name": model.graph_name,
        "nodes": nodes,
        "initializers": inits,
        "inputs": model.graph_inputs,
        "outputs": model.graph_outputs,
        "opset_version": model.opset_version,
    });
    serde_json::to_string(&doc).expect("JSON values always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_passthrough_decodes() {
        let text = r#"{"nodes":[],"initializers":{},"inputs":[["x",[1,1,28,28]]],"outputs":[["x",[1,1,28,28]]]}"#;
        let m = decode_json_mirror(text).unwrap();
        assert!(m.nodes.is_empty());
        assert_eq!(m.opset_version, 13);
        assert_eq!(m.graph_inputs, vec![("x".to_string(), vec![1, 1, 28, 28])]);
        let encoded = encode_json_mirror(&m);
        assert!(encoded.contains(r#""nodes":[]"#));
        assert_eq!(decode_json_mirror(&encoded).unwrap(), m);
    }

    #[test]
    fn missing_op_type_names_the_path() {
        let text = r#"{"nodes":[{"inputs":["x"],"outputs":["y"]}],"initializers":{},"inputs":[["x",[4]]],"outputs":[]}"#;
        assert_eq!(
            decode_json_mirror(text),
            Err(IngestError::SchemaViolation("nodes[0].op_type".into()))
        );
    }

    #[test]
    fn single_relu_encodes_one_node() {
        let mut m = RawModel::empty("r");
        m.graph_inputs.push(("x".into(), vec![1, 4]));
        m.graph_outputs.push(("y".into(), vec![1, 4]));
        m.nodes.push(RawNode::new(OpType::Relu, &["x"], &["y"]));
        let text = encode_json_mirror(&m);
        let v: Value = serde_json::from_str(&text).unwrap();
        let nodes = v["nodes"].as_array().unwrap();
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0]["op_type"], "Relu");
    }

    #[test]
    fn attribute_kinds_are_distinguished() {
        let text = r#"{"nodes":[{"op_type":"Gemm","inputs":["x"],"outputs":["y"],
            "attributes":{"alpha":1.0,"transB":1,"k":[3,3],"f":{"floats":[0.5]},"s":{"string":"NOTSET"}}}],
            "initializers":{},"inputs":[["x",[1,4]]],"outputs":[["y",[1,4]]]}"#;
        let m = decode_json_mirror(text).unwrap();
        let a = &m.nodes[0].attributes;
        assert_eq!(a["alpha"], AttrValue::Float(1.0));
        assert_eq!(a["transB"], AttrValue::Int(1));
        assert_eq!(a["k"], AttrValue::Ints(vec![3, 3]));
        assert_eq!(a["f"], AttrValue::Floats(vec![0.5]));
        assert_eq!(a["s"], AttrValue::Text("NOTSET".into()));
        assert_eq!(decode_json_mirror(&encode_json_mirror(&m)).unwrap(), m);
    }

    #[test]
    fn unsupported_operator_in_mirror() {
        let text = r#"{"nodes":[{"op_type":"LSTM","inputs":["x"],"outputs":["y"]}],"initializers":{},"inputs":[["x",[4]]],"outputs":[]}"#;
        assert_eq!(
            decode_json_mirror(text),
            Err(IngestError::UnsupportedOperator("LSTM".into()))
        );
    }
}

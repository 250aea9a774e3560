//! Layer-level intermediate representation.
//!
//! [`build_ir`] turns a decoded ONNX graph into an ordered chain of
//! [`LayerNode`]s with resolved hyperparameters and inferred shapes.
//! Batch normalization is folded into a per-channel [`LayerOp::ScaleShift`],
//! `Gemm` and `MatMul`(+`Add`) become [`LayerOp::FullyConnected`], and
//! `Flatten`/`Reshape` become [`LayerOp::Flatten`].

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::onnx::{AttrValue, FloatTensor, OpType, RawModel, RawNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("graph is not a linear chain at '{0}'")]
    NonLinearTopology(String),
    #[error("shape mismatch at layer '{0}'")]
    ShapeMismatch(String),
    #[error("layer '{0}' is missing its weights")]
    MissingWeights(String),
    #[error("batch-norm parameter vectors have different lengths")]
    LengthMismatch,
    #[error("layer '{layer}': unsupported {detail}")]
    Unsupported { layer: String, detail: String },
    #[error("model has no activation input")]
    NoInput,
}

/// Activation shape: a `(channels, height, width)` feature map or a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Chw { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn chw(c: usize, h: usize, w: usize) -> Self {
        Shape::Chw { c, h, w }
    }

    pub fn len(&self) -> usize {
        match *self {
            Shape::Chw { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values per stream token: one pixel (all channels) or the whole vector.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Chw { c, .. } => c,
            Shape::Flat(n) => n,
        }
    }

    /// Number of stream tokens carrying one tensor of this shape.
    pub fn tokens(&self) -> usize {
        match *self {
            Shape::Chw { h, w, .. } => h * w,
            Shape::Flat(_) => 1,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Chw { c, h, w } => write!(f, "({c}, {h}, {w})"),
            Shape::Flat(n) => write!(f, "({n})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    MaxPool,
    ScaleShift,
    Relu,
    FullyConnected,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerOp {
    Conv {
        kernel: usize,
        stride: usize,
        pad: usize,
        out_channels: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    ScaleShift,
    Relu,
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Flatten,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv { .. } => LayerKind::Conv,
            LayerOp::MaxPool { .. } => LayerKind::MaxPool,
            LayerOp::ScaleShift => LayerKind::ScaleShift,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::FullyConnected { .. } => LayerKind::FullyConnected,
            LayerOp::Flatten => LayerKind::Flatten,
        }
    }
}

/// Dense float tensor used for layer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

impl From<FloatTensor> for Tensor {
    fn from(t: FloatTensor) -> Self {
        Self {
            shape: t.shape,
            data: t.data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub op: LayerOp,
    pub input_shape: Shape,
    pub output_shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f32>>,
}

impl LayerNode {
    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    /// A layer with placeholder shapes; call [`infer_shapes`] on the model.
    pub fn new(name: &str, op: LayerOp) -> Self {
        Self {
            name: name.to_string(),
            op,
            input_shape: Shape::Flat(0),
            output_shape: Shape::Flat(0),
            weights: None,
            bias: None,
            scale: None,
        }
    }

    pub fn conv(name: &str, weights: Tensor, bias: Vec<f32>, stride: usize, pad: usize) -> Self {
        let op = LayerOp::Conv {
            kernel: weights.shape[3],
            stride,
            pad,
            out_channels: weights.shape[0],
        };
        Self {
            weights: Some(weights),
            bias: Some(bias),
            ..Self::new(name, op)
        }
    }

    pub fn fully_connected(name: &str, weights: Tensor, bias: Vec<f32>) -> Self {
        let op = LayerOp::FullyConnected {
            in_features: weights.shape[1],
            out_features: weights.shape[0],
        };
        Self {
            weights: Some(weights),
            bias: Some(bias),
            ..Self::new(name, op)
        }
    }

    pub fn scale_shift(name: &str, scale: Vec<f32>, shift: Vec<f32>) -> Self {
        Self {
            scale: Some(scale),
            bias: Some(shift),
            ..Self::new(name, LayerOp::ScaleShift)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIR {
    pub source_name: String,
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub layers: Vec<LayerNode>,
}

impl ModelIR {
    pub fn new(source_name: &str, input_shape: Shape, layers: Vec<LayerNode>) -> Result<Self, IrError> {
        infer_shapes(ModelIR {
            source_name: source_name.to_string(),
            input_shape,
            output_shape: input_shape,
            layers,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("IR serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Folds batch normalization into `y = a * x + b` per channel.
pub fn fold_batchnorm(
    scale: &[f32],
    shift: &[f32],
    mean: &[f32],
    var: &[f32],
    epsilon: f32,
) -> Result<(Vec<f32>, Vec<f32>), IrError> {
    let n = scale.len();
    if shift.len() != n || mean.len() != n || var.len() != n {
        return Err(IrError::LengthMismatch);
    }
    let eps = f64::from(epsilon);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let ai = f64::from(scale[i]) / (f64::from(var[i]) + eps).sqrt();
        a.push(ai as f32);
        b.push((f64::from(shift[i]) - f64::from(mean[i]) * ai) as f32);
    }
    Ok((a, b))
}

pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn output_shape(layer: &LayerNode, input: Shape) -> Result<Shape, IrError> {
    let mismatch = || IrError::ShapeMismatch(layer.name.clone());
    match (layer.op, input) {
        (LayerOp::Conv { kernel, stride, pad, out_channels }, Shape::Chw { c, h, w }) => {
            let weights = layer
                .weights
                .as_ref()
                .ok_or_else(|| IrError::MissingWeights(layer.name.clone()))?;
            if weights.shape != [out_channels, c, kernel, kernel] {
                return Err(mismatch());
            }
            if layer.bias.as_ref().is_some_and(|b| b.len() != out_channels) {
                return Err(mismatch());
            }
            if pad >= kernel {
                return Err(IrError::Unsupported {
                    layer: layer.name.clone(),
                    detail: format!("padding {pad} >= kernel {kernel}"),
                });
            }
            let ho = conv_output_extent(h, kernel, stride, pad).ok_or_else(mismatch)?;
            let wo = conv_output_extent(w, kernel, stride, pad).ok_or_else(mismatch)?;
            Ok(Shape::chw(out_channels, ho, wo))
        }
        (LayerOp::MaxPool { window, stride }, Shape::Chw { c, h, w }) => {
            let ho = conv_output_extent(h, window, stride, 0).ok_or_else(mismatch)?;
            let wo = conv_output_extent(w, window, stride, 0).ok_or_else(mismatch)?;
            Ok(Shape::chw(c, ho, wo))
        }
        (LayerOp::ScaleShift, shape) => {
            let channels = shape.channels();
            let ok = layer.scale.as_ref().is_some_and(|s| s.len() == channels)
                && layer.bias.as_ref().is_some_and(|b| b.len() == channels);
            if ok {
                Ok(shape)
            } else {
                Err(mismatch())
            }
        }
        (LayerOp::Relu, shape) => Ok(shape),
        (LayerOp::Flatten, shape) => Ok(Shape::Flat(shape.len())),
        (LayerOp::FullyConnected { in_features, out_features }, Shape::Flat(n)) if n == in_features => {
            let weights = layer
                .weights
                .as_ref()
                .ok_or_else(|| IrError::MissingWeights(layer.name.clone()))?;
            if weights.shape != [out_features, in_features] {
                return Err(mismatch());
            }
            if layer.bias.as_ref().is_some_and(|b| b.len() != out_features) {
                return Err(mismatch());
            }
            Ok(Shape::Flat(out_features))
        }
        _ => Err(mismatch()),
    }
}

/// Recomputes every layer's input/output shape from the model input.
pub fn infer_shapes(mut ir: ModelIR) -> Result<ModelIR, IrError> {
    let mut current = ir.input_shape;
    for layer in &mut ir.layers {
        let out = output_shape(layer, current)?;
        layer.input_shape = current;
        layer.output_shape = out;
        current = out;
    }
    ir.output_shape = current;
    Ok(ir)
}

struct NodeCtx<'a> {
    model: &'a RawModel,
    node: &'a RawNode,
    name: String,
}

impl NodeCtx<'_> {
    fn unsupported(&self, detail: impl Into<String>) -> IrError {
        IrError::Unsupported {
            layer: self.name.clone(),
            detail: detail.into(),
        }
    }

    fn ints(&self, attr: &str) -> Option<&[i64]> {
        self.node.attr(attr).and_then(AttrValue::as_ints)
    }

    fn int(&self, attr: &str, default: i64) -> i64 {
        self.node.attr(attr).and_then(AttrValue::as_int).unwrap_or(default)
    }

    fn float(&self, attr: &str, default: f32) -> f32 {
        self.node.attr(attr).and_then(AttrValue::as_float).unwrap_or(default)
    }

    /// A square 2-D attribute such as `strides = [s, s]`.
    fn square(&self, attr: &str, default: usize) -> Result<usize, IrError> {
        match self.ints(attr) {
            None => Ok(default),
            Some([a, b]) if a == b && *a > 0 => Ok(*a as usize),
            Some(v) => Err(self.unsupported(format!("{attr} = {v:?}"))),
        }
    }

    fn symmetric_pad(&self) -> Result<usize, IrError> {
        match self.ints("pads") {
            None => Ok(0),
            Some(p) if p.len() == 4 && p.iter().all(|&x| x == p[0] && x >= 0) => Ok(p[0] as usize),
            Some(p) => Err(self.unsupported(format!("pads = {p:?}"))),
        }
    }

    fn unit_dilations(&self) -> Result<(), IrError> {
        match self.ints("dilations") {
            Some(d) if d.iter().any(|&x| x != 1) => Err(self.unsupported(format!("dilations = {d:?}"))),
            _ => Ok(()),
        }
    }

    fn no_auto_pad(&self) -> Result<(), IrError> {
        match self.node.attr("auto_pad") {
            Some(AttrValue::Text(s)) if s != "NOTSET" => Err(self.unsupported(format!("auto_pad = {s}"))),
            _ => Ok(()),
        }
    }

    fn param(&self, index: usize) -> Option<&FloatTensor> {
        self.node
            .inputs
            .get(index)
            .filter(|n| !n.is_empty())
            .and_then(|n| self.model.initializers.get(n))
    }

    fn required_param(&self, index: usize) -> Result<&FloatTensor, IrError> {
        self.param(index).ok_or_else(|| IrError::MissingWeights(self.name.clone()))
    }

    /// Extra inputs beyond the data input must all be initializers.
    fn check_param_inputs(&self) -> Result<(), IrError> {
        for input in self.node.inputs.iter().skip(1) {
            if !input.is_empty() && !self.model.initializers.contains_key(input) {
                return Err(IrError::NonLinearTopology(self.name.clone()));
            }
        }
        Ok(())
    }
}

fn transpose(rows: usize, cols: usize, data: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn fc_from_matrix(name: &str, w: &FloatTensor, transposed: bool, bias: Option<Vec<f32>>) -> Result<LayerNode, IrError> {
    let [a, b] = w.shape[..] else {
        return Err(IrError::ShapeMismatch(name.to_string()));
    };
    // stored as (out, in)
    let (out_f, in_f, data) = if transposed {
        (a, b, w.data.clone())
    } else {
        (b, a, transpose(a, b, &w.data))
    };
    let bias = bias.unwrap_or_else(|| vec![0.0; out_f]);
    Ok(LayerNode::fully_connected(name, Tensor::new(vec![out_f, in_f], data), bias))
}

fn input_shape_from_dims(dims: &[i64]) -> Result<Shape, IrError> {
    let batch_ok = |d: i64| d == 1 || d < 0;
    match dims {
        [n, c, h, w] if batch_ok(*n) && *c > 0 && *h > 0 && *w > 0 => {
            Ok(Shape::chw(*c as usize, *h as usize, *w as usize))
        }
        [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok(Shape::chw(*c as usize, *h as usize, *w as usize)),
        [n, f] if batch_ok(*n) && *f > 0 => Ok(Shape::Flat(*f as usize)),
        [f] if *f > 0 => Ok(Shape::Flat(*f as usize)),
        _ => Err(IrError::Unsupported {
            layer: "<input>".into(),
            detail: format!("input dims {dims:?}"),
        }),
    }
}

/// Builds the layer chain from a validated raw model.
pub fn build_ir(model: &RawModel) -> Result<ModelIR, IrError> {
    let (input_name, input_dims) = model.data_inputs().next().ok_or(IrError::NoInput)?;
    if model.data_inputs().count() > 1 {
        return Err(IrError::NonLinearTopology("<inputs>".into()));
    }
    let input_shape = input_shape_from_dims(input_dims)?;

    let mut consumers: HashMap<&str, usize> = HashMap::new();
    for node in &model.nodes {
        for input in &node.inputs {
            *consumers.entry(input.as_str()).or_default() += 1;
        }
    }

    let mut layers: Vec<LayerNode> = Vec::new();
    let mut counters: HashMap<LayerKind, usize> = HashMap::new();
    let mut current = input_name.as_str();
    let mut i = 0;
    while i < model.nodes.len() {
        let node = &model.nodes[i];
        let provisional = format!("{}{}", node.op_type.as_str().to_lowercase(), i);
        if node.inputs.first().map(String::as_str) != Some(current) || node.outputs.len() != 1 {
            return Err(IrError::NonLinearTopology(provisional));
        }
        if consumers.get(current).copied().unwrap_or(0) > 1 {
            return Err(IrError::NonLinearTopology(provisional));
        }
        let ctx = NodeCtx {
            model,
            node,
            name: provisional,
        };
        ctx.check_param_inputs()?;

        let mut consumed = 1;
        let layer = match node.op_type {
            OpType::Conv => {
                ctx.unit_dilations()?;
                ctx.no_auto_pad()?;
                if ctx.int("group", 1) != 1 {
                    return Err(ctx.unsupported("grouped convolution"));
                }
                let w = ctx.required_param(1)?;
                if w.shape.len() != 4 || w.shape[2] != w.shape[3] {
                    return Err(ctx.unsupported(format!("kernel shape {:?}", w.shape)));
                }
                let kernel = ctx.square("kernel_shape", w.shape[2])?;
                if kernel != w.shape[2] {
                    return Err(IrError::ShapeMismatch(ctx.name.clone()));
                }
                let bias = match ctx.param(2) {
                    Some(b) => b.data.clone(),
                    None => vec![0.0; w.shape[0]],
                };
                let stride = ctx.square("strides", 1)?;
                let pad = ctx.symmetric_pad()?;
                LayerNode::conv("", w.clone().into(), bias, stride, pad)
            }
            OpType::MaxPool => {
                ctx.unit_dilations()?;
                ctx.no_auto_pad()?;
                if ctx.int("ceil_mode", 0) != 0 {
                    return Err(ctx.unsupported("ceil_mode = 1"));
                }
                if ctx.symmetric_pad()? != 0 {
                    return Err(ctx.unsupported("padded max pooling"));
                }
                if node.outputs.len() > 1 {
                    return Err(ctx.unsupported("max-pool indices output"));
                }
                let window = ctx.square("kernel_shape", 0)?;
                if window == 0 {
                    return Err(ctx.unsupported("missing kernel_shape"));
                }
                let stride = ctx.square("strides", 1)?;
                LayerNode::new("", LayerOp::MaxPool { window, stride })
            }
            OpType::BatchNormalization => {
                let eps = ctx.float("epsilon", 1e-5);
                let (a, b) = fold_batchnorm(
                    &ctx.required_param(1)?.data,
                    &ctx.required_param(2)?.data,
                    &ctx.required_param(3)?.data,
                    &ctx.required_param(4)?.data,
                    eps,
                )?;
                LayerNode::scale_shift("", a, b)
            }
            OpType::Relu => LayerNode::new("", LayerOp::Relu),
            OpType::Flatten => {
                if ctx.int("axis", 1) != 1 {
                    return Err(ctx.unsupported("flatten axis other than 1"));
                }
                LayerNode::new("", LayerOp::Flatten)
            }
            OpType::Reshape => {
                // only the data input is accepted; shape tensors would be int64
                if node.inputs.len() > 1 {
                    return Err(ctx.unsupported("reshape with a shape input"));
                }
                LayerNode::new("", LayerOp::Flatten)
            }
            OpType::Gemm => {
                if ctx.float("alpha", 1.0) != 1.0 || ctx.float("beta", 1.0) != 1.0 {
                    return Err(ctx.unsupported("gemm alpha/beta other than 1"));
                }
                if ctx.int("transA", 0) != 0 {
                    return Err(ctx.unsupported("transA = 1"));
                }
                let w = ctx.required_param(1)?;
                let bias = ctx.param(2).map(|b| b.data.clone());
                fc_from_matrix(&ctx.name, w, ctx.int("transB", 0) != 0, bias)?
            }
            OpType::MatMul => {
                let w = ctx.required_param(1)?;
                let mut bias = None;
                let out = node.outputs[0].as_str();
                if let Some(next) = model.nodes.get(i + 1) {
                    if next.op_type == OpType::Add && next.inputs.len() == 2 {
                        let other = next.inputs.iter().find(|n| n.as_str() != out);
                        let fused = next.inputs.iter().any(|n| n == out)
                            && other.is_some_and(|o| model.initializers.contains_key(o));
                        if fused {
                            bias = Some(model.initializers[other.unwrap()].data.clone());
                            consumed = 2;
                        }
                    }
                }
                fc_from_matrix(&ctx.name, w, false, bias)?
            }
            OpType::Add => {
                return Err(if node.inputs.iter().skip(1).all(|n| model.initializers.contains_key(n)) {
                    ctx.unsupported("add that does not follow a matmul")
                } else {
                    IrError::NonLinearTopology(ctx.name.clone())
                });
            }
        };

        let kind = layer.kind();
        let idx = counters.entry(kind).or_default();
        let prefix = match kind {
            LayerKind::Conv => "conv",
            LayerKind::MaxPool => "pool",
            LayerKind::ScaleShift => "bn",
            LayerKind::Relu => "relu",
            LayerKind::FullyConnected => "fc",
            LayerKind::Flatten => "flatten",
        };
        let name = format!("{prefix}{idx}");
        *idx += 1;
        layers.push(LayerNode { name, ..layer });
        current = model.nodes[i + consumed - 1].outputs[0].as_str();
        i += consumed;
    }

    if let Some((out, _)) = model.graph_outputs.first() {
        if out != current || model.graph_outputs.len() > 1 {
            return Err(IrError::NonLinearTopology(out.clone()));
        }
    }
    ModelIR::new(&model.graph_name, input_shape, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conv_model(k: usize, filters: usize) -> RawModel {
        let mut m = RawModel::empty("c");
        m.graph_inputs.push(("x".into(), vec![1, 1, 28, 28]));
        m.initializers.insert(
            "w".into(),
            FloatTensor::new(vec![filters, 1, k, k], vec![0.1; filters * k * k]),
        );
        m.nodes.push(
            RawNode::new(OpType::Conv, &["x", "w"], &["c"])
                .with_attr("kernel_shape", AttrValue::Ints(vec![k as i64, k as i64])),
        );
        m
    }

    #[test]
    fn conv_output_shape() {
        let ir = build_ir(&conv_model(3, 16)).unwrap();
        assert_eq!(ir.layers[0].output_shape, Shape::chw(16, 26, 26));
        assert_eq!(ir.layers[0].bias.as_deref(), Some(&[0.0; 16][..]));
    }

    #[test]
    fn maxpool_then_relu_shapes() {
        let mut m = conv_model(3, 16);
        m.nodes.push(
            RawNode::new(OpType::MaxPool, &["c"], &["p"])
                .with_attr("kernel_shape", AttrValue::Ints(vec![2, 2]))
                .with_attr("strides", AttrValue::Ints(vec![2, 2])),
        );
        m.nodes.push(RawNode::new(OpType::Relu, &["p"], &["r"]));
        let ir = build_ir(&m).unwrap();
        assert_eq!(ir.layers[1].output_shape, Shape::chw(16, 13, 13));
        assert_eq!(ir.layers[2].output_shape, Shape::chw(16, 13, 13));
        assert_eq!(ir.output_shape, Shape::chw(16, 13, 13));
    }

    #[test]
    fn fold_batchnorm_examples() {
        let (a, b) = fold_batchnorm(&[1.0], &[0.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!((a[0], b[0]), (1.0, 0.0));
        let (a, b) = fold_batchnorm(&[2.0], &[1.0], &[3.0], &[4.0], 0.0).unwrap();
        assert_eq!((a[0], b[0]), (1.0, -2.0));
        assert_eq!(
            fold_batchnorm(&[1.0, 2.0], &[0.0], &[0.0], &[1.0], 1e-5),
            Err(IrError::LengthMismatch)
        );
    }

    #[test]
    fn fc_without_flatten_is_a_shape_mismatch() {
        let w = Tensor::new(vec![10, 784], vec![0.0; 7840]);
        let ir = ModelIR {
            source_name: "t".into(),
            input_shape: Shape::chw(16, 13, 13),
            output_shape: Shape::Flat(10),
            layers: vec![LayerNode::fully_connected("fc", w, vec![0.0; 10])],
        };
        assert_eq!(infer_shapes(ir), Err(IrError::ShapeMismatch("fc".into())));
    }

    #[test]
    fn infer_shapes_is_idempotent() {
        let ir = build_ir(&conv_model(3, 4)).unwrap();
        let again = infer_shapes(ir.clone()).unwrap();
        assert_eq!(again, ir);
        assert_eq!(infer_shapes(again.clone()).unwrap(), again);
    }

    #[test]
    fn conv_then_relu_infers_relu_shape() {
        let mut m = conv_model(3, 16);
        m.nodes.push(RawNode::new(OpType::Relu, &["c"], &["r"]));
        let ir = build_ir(&m).unwrap();
        assert_eq!(ir.layers[1].output_shape, Shape::chw(16, 26, 26));
    }

    #[test]
    fn branching_graph_is_rejected() {
        let mut m = conv_model(3, 2);
        m.nodes.push(RawNode::new(OpType::Relu, &["c"], &["r1"]));
        m.nodes.push(RawNode::new(OpType::Relu, &["c"], &["r2"]));
        assert!(matches!(build_ir(&m), Err(IrError::NonLinearTopology(_))));
    }

    #[test]
    fn gemm_transb_and_matmul_add_agree() {
        // W stored (out=2, in=3) for Gemm transB=1, (in=3, out=2) for MatMul
        let w_out_in = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w_in_out = transpose(2, 3, &w_out_in);
        let mut g = RawModel::empty("g");
        g.graph_inputs.push(("x".into(), vec![1, 3]));
        g.initializers.insert("w".into(), FloatTensor::new(vec![2, 3], w_out_in.clone()));
        g.initializers.insert("b".into(), FloatTensor::new(vec![2], vec![0.5, -0.5]));
        g.nodes.push(
            RawNode::new(OpType::Gemm, &["x", "w", "b"], &["y"]).with_attr("transB", AttrValue::Int(1)),
        );
        let mut mm = RawModel::empty("g");
        mm.graph_inputs.push(("x".into(), vec![1, 3]));
        mm.initializers.insert("w".into(), FloatTensor::new(vec![3, 2], w_in_out));
        mm.initializers.insert("b".into(), FloatTensor::new(vec![2], vec![0.5, -0.5]));
        mm.nodes.push(RawNode::new(OpType::MatMul, &["x", "w"], &["t"]));
        mm.nodes.push(RawNode::new(OpType::Add, &["t", "b"], &["y"]));
        let a = build_ir(&g).unwrap();
        let b = build_ir(&mm).unwrap();
        assert_eq!(a.layers.len(), 1);
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.layers[0].weights.as_ref().unwrap().data, w_out_in);
    }

    #[test]
    fn gemm_with_alpha_is_rejected() {
        let mut g = RawModel::empty("g");
        g.graph_inputs.push(("x".into(), vec![1, 3]));
        g.initializers.insert("w".into(), FloatTensor::new(vec![2, 3], vec![0.0; 6]));
        g.nodes.push(
            RawNode::new(OpType::Gemm, &["x", "w"], &["y"])
                .with_attr("alpha", AttrValue::Float(2.0))
                .with_attr("transB", AttrValue::Int(1)),
        );
        assert!(matches!(build_ir(&g), Err(IrError::Unsupported { .. })));
    }

    #[test]
    fn conv_without_weights_reports_layer() {
        let mut m = RawModel::empty("c");
        m.graph_inputs.push(("x".into(), vec![1, 1, 8, 8]));
        m.graph_inputs.push(("w".into(), vec![2, 1, 3, 3]));
        m.nodes.push(RawNode::new(OpType::Conv, &["x", "w"], &["c"]));
        // a second activation input makes the graph non-linear before weights are looked up
        assert!(build_ir(&m).is_err());
    }

    #[test]
    fn ir_json_round_trip() {
        let ir = build_ir(&conv_model(3, 2)).unwrap();
        assert_eq!(ModelIR::from_json(&ir.to_json()).unwrap(), ir);
    }

    proptest! {
        #[test]
        fn conv_extent_matches_sliding_window_count(h in 1usize..40, k in 1usize..8, s in 1usize..5, p in 0usize..4) {
            prop_assume!(p < k);
            let brute = (0..h + 2 * p).filter(|&start| start + k <= h + 2 * p && start % s == 0).count();
            let expected = if brute == 0 { None } else { Some(brute) };
            prop_assert_eq!(conv_output_extent(h, k, s, p), expected);
        }

        #[test]
        fn folded_batchnorm_matches_reference(
            params in proptest::collection::vec((-2.0f32..2.0, -1.0f32..1.0, -1.0f32..1.0, 0.25f32..4.0), 16),
            xs in proptest::collection::vec(-10.0f32..10.0, 1000),
        ) {
            let scale: Vec<f32> = params.iter().map(|p| p.0).collect();
            let shift: Vec<f32> = params.iter().map(|p| p.1).collect();
            let mean: Vec<f32> = params.iter().map(|p| p.2).collect();
            let var: Vec<f32> = params.iter().map(|p| p.3).collect();
            let eps = 1e-5f32;
            let (a, b) = fold_batchnorm(&scale, &shift, &mean, &var, eps).unwrap();
            for (j, &x) in xs.iter().enumerate() {
                let c = j % 16;
                let x = f64::from(x);
                let reference = f64::from(scale[c]) * (x - f64::from(mean[c]))
                    / (f64::from(var[c]) + f64::from(eps)).sqrt()
                    + f64::from(shift[c]);
                let folded = f64::from(a[c]) * x + f64::from(b[c]);
                prop_assert!((folded - reference).abs() <= 1e-5, "{folded} vs {reference}");
            }
        }
    }
}

//! Dataflow graphs: actors, FIFO channels and the layer-to-actor mapping.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::ir::{LayerOp, Shape};
use crate::quant::{FixedPointFormat, QuantizedModel, QuantizedTensor};

use super::arith::MacFormats;
use super::SimError;

pub const DEFAULT_FIFO_CAPACITY: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum ActorKind {
    Source {
        shape: Shape,
        format: FixedPointFormat,
    },
    LineBuffer {
        input: Shape,
        kernel: usize,
        stride: usize,
        pad: usize,
        format: FixedPointFormat,
    },
    WeightStore {
        weights: QuantizedTensor,
    },
    BiasStore {
        bias: QuantizedTensor,
    },
    Conv {
        input: Shape,
        output: Shape,
        kernel: usize,
        formats: MacFormats,
    },
    ScaleShift {
        shape: Shape,
        scale: QuantizedTensor,
        shift: QuantizedTensor,
        input_format: FixedPointFormat,
        output_format: FixedPointFormat,
    },
    Relu {
        shape: Shape,
        format: FixedPointFormat,
    },
    MaxPool {
        input: Shape,
        output: Shape,
        window: usize,
        stride: usize,
        format: FixedPointFormat,
    },
    Flatten {
        input: Shape,
        format: FixedPointFormat,
    },
    FullyConnected {
        weights: QuantizedTensor,
        bias: QuantizedTensor,
        formats: MacFormats,
    },
    Sink {
        shape: Shape,
        format: FixedPointFormat,
    },
    /// One-token pass-through standing in for an active switch or select.
    Route {
        shape: Shape,
        format: FixedPointFormat,
    },
}

const IN: &[&str] = &["in"];
const OUT: &[&str] = &["out"];
const NONE: &[&str] = &[];
const CONV_IN: &[&str] = &["in", "weights", "bias"];

pub const ACTOR_CLASSES: [&str; 12] = [
    "Source",
    "LineBuffer",
    "WeightStore",
    "BiasStore",
    "Conv",
    "ScaleShift",
    "Relu",
    "MaxPool",
    "Flatten",
    "FullyConnected",
    "Sink",
    "Route",
];

/// `(input ports, output ports)` of an actor class.
pub fn class_ports(class: &str) -> Option<(&'static [&'static str], &'static [&'static str])> {
    Some(match class {
        "Source" | "WeightStore" | "BiasStore" => (NONE, OUT),
        "Sink" => (IN, NONE),
        "Conv" => (CONV_IN, OUT),
        "LineBuffer" | "ScaleShift" | "Relu" | "MaxPool" | "Flatten" | "FullyConnected" | "Route" => (IN, OUT),
        _ => return None,
    })
}

fn shape_param(s: &Shape) -> String {
    match *s {
        Shape::Chw { c, h, w } => format!("{c}x{h}x{w}"),
        Shape::Flat(n) => n.to_string(),
    }
}

fn format_param(f: &FixedPointFormat) -> String {
    format!("{}.{}", f.total_bits, f.frac_bits)
}

impl ActorKind {
    pub fn class(&self) -> &'static str {
        match self {
            ActorKind::Source { .. } => "Source",
            ActorKind::LineBuffer { .. } => "LineBuffer",
            ActorKind::WeightStore { .. } => "WeightStore",
            ActorKind::BiasStore { .. } => "BiasStore",
            ActorKind::Conv { .. } => "Conv",
            ActorKind::ScaleShift { .. } => "ScaleShift",
            ActorKind::Relu { .. } => "Relu",
            ActorKind::MaxPool { .. } => "MaxPool",
            ActorKind::Flatten { .. } => "Flatten",
            ActorKind::FullyConnected { .. } => "FullyConnected",
            ActorKind::Sink { .. } => "Sink",
            ActorKind::Route { .. } => "Route",
        }
    }

    pub fn input_ports(&self) -> &'static [&'static str] {
        class_ports(self.class()).unwrap().0
    }

    pub fn output_ports(&self) -> &'static [&'static str] {
        class_ports(self.class()).unwrap().1
    }

    pub fn is_parameter_store(&self) -> bool {
        matches!(self, ActorKind::WeightStore { .. } | ActorKind::BiasStore { .. })
    }

    /// Stored parameter tensors, in declaration order.
    pub fn parameter_tensors(&self) -> Vec<&QuantizedTensor> {
        match self {
            ActorKind::WeightStore { weights } => vec![weights],
            ActorKind::BiasStore { bias } => vec![bias],
            ActorKind::ScaleShift { scale, shift, .. } => vec![scale, shift],
            ActorKind::FullyConnected { weights, bias, .. } => vec![weights, bias],
            _ => vec![],
        }
    }

    pub fn parameter_bits(&self) -> u64 {
        self.parameter_tensors()
            .iter()
            .map(|t| t.len() as u64 * u64::from(t.format.total_bits))
            .sum()
    }

    /// Hyperparameters as string pairs; stored codes are not included.
    pub fn parameters(&self) -> Vec<(String, String)> {
        fn p(k: &str, v: impl ToString) -> (String, String) {
            (k.to_string(), v.to_string())
        }
        fn tensor(prefix: &str, t: &QuantizedTensor) -> [(String, String); 2] {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            [
                p(&format!("{prefix}_shape"), dims.join("x")),
                p(&format!("{prefix}_format"), format_param(&t.format)),
            ]
        }
        fn mac(f: &MacFormats) -> [(String, String); 4] {
            [
                p("input_format", format_param(&f.input)),
                p("weight_format", format_param(&f.weight)),
                p("bias_format", format_param(&f.bias)),
                p("output_format", format_param(&f.output)),
            ]
        }
        match self {
            ActorKind::Source { shape, format }
            | ActorKind::Sink { shape, format }
            | ActorKind::Relu { shape, format }
            | ActorKind::Route { shape, format } => {
                vec![p("shape", shape_param(shape)), p("format", format_param(format))]
            }
            ActorKind::LineBuffer { input, kernel, stride, pad, format } => vec![
                p("input", shape_param(input)),
                p("kernel", kernel),
                p("stride", stride),
                p("pad", pad),
                p("format", format_param(format)),
            ],
            ActorKind::WeightStore { weights } => tensor("weights", weights).to_vec(),
            ActorKind::BiasStore { bias } => tensor("bias", bias).to_vec(),
            ActorKind::Conv { input, output, kernel, formats } => {
                let mut v = vec![
                    p("input", shape_param(input)),
                    p("output", shape_param(output)),
                    p("kernel", kernel),
                ];
                v.extend(mac(formats));
                v
            }
            ActorKind::ScaleShift { shape, scale, shift, input_format, output_format } => {
                let mut v = vec![p("shape", shape_param(shape))];
                v.extend(tensor("scale", scale));
                v.extend(tensor("shift", shift));
                v.push(p("input_format", format_param(input_format)));
                v.push(p("output_format", format_param(output_format)));
                v
            }
            ActorKind::MaxPool { input, output, window, stride, format } => vec![
                p("input", shape_param(input)),
                p("output", shape_param(output)),
                p("window", window),
                p("stride", stride),
                p("format", format_param(format)),
            ],
            ActorKind::Flatten { input, format } => {
                vec![p("input", shape_param(input)), p("format", format_param(format))]
            }
            ActorKind::FullyConnected { weights, bias, formats } => {
                let mut v = tensor("weights", weights).to_vec();
                v.extend(tensor("bias", bias));
                v.extend(mac(formats));
                v
            }
        }
    }

    /// Activation shape carried by the primary output; `None` for parameter
    /// stores, line buffers (window tokens) and the sink.
    pub fn output_shape(&self) -> Option<Shape> {
        match self {
            ActorKind::Source { shape, .. }
            | ActorKind::Relu { shape, .. }
            | ActorKind::Route { shape, .. }
            | ActorKind::ScaleShift { shape, .. } => Some(*shape),
            ActorKind::Conv { output, .. } | ActorKind::MaxPool { output, .. } => Some(*output),
            ActorKind::Flatten { input, .. } => Some(Shape::Flat(input.len())),
            ActorKind::FullyConnected { bias, .. } => Some(Shape::Flat(bias.len())),
            ActorKind::LineBuffer { .. } | ActorKind::WeightStore { .. } | ActorKind::BiasStore { .. } | ActorKind::Sink { .. } => None,
        }
    }

    /// Format of the tokens on the actor's primary output.
    pub fn output_format(&self) -> Option<FixedPointFormat> {
        match self {
            ActorKind::Source { format, .. }
            | ActorKind::LineBuffer { format, .. }
            | ActorKind::Relu { format, .. }
            | ActorKind::MaxPool { format, .. }
            | ActorKind::Flatten { format, .. }
            | ActorKind::Route { format, .. } => Some(*format),
            ActorKind::WeightStore { weights } => Some(weights.format),
            ActorKind::BiasStore { bias } => Some(bias.format),
            ActorKind::Conv { formats, .. } | ActorKind::FullyConnected { formats, .. } => Some(formats.output),
            ActorKind::ScaleShift { output_format, .. } => Some(*output_format),
            ActorKind::Sink { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub name: String,
    pub kind: ActorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub src: usize,
    pub src_port: String,
    pub dst: usize,
    pub dst_port: String,
    pub capacity: usize,
    pub format: FixedPointFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataflowGraph {
    pub name: String,
    pub actors: Vec<Actor>,
    pub channels: Vec<Channel>,
}

/// A connection between named actor ports.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Connection {
    pub src: String,
    pub src_port: String,
    pub dst: String,
    pub dst_port: String,
}

impl fmt::Display for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{} -> {}.{}", self.src, self.src_port, self.dst, self.dst_port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActorSkeleton {
    pub name: String,
    pub class: String,
    pub params: Vec<(String, String)>,
}

/// Graph structure without stored parameter codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSkeleton {
    pub name: String,
    pub actors: Vec<ActorSkeleton>,
    pub connections: Vec<Connection>,
}

impl GraphSkeleton {
    /// Checks that every declared port is connected exactly once, that
    /// connections reference existing actors and ports, and that there are no
    /// self loops.
    pub fn validate(&self) -> Result<(), String> {
        let mut ports: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        let mut names = HashSet::new();
        for a in &self.actors {
            if !names.insert(a.name.as_str()) {
                return Err(format!("Duplicate actor '{}'", a.name));
            }
            let (ins, outs) =
                class_ports(&a.class).ok_or_else(|| format!("Unknown class '{}' for actor '{}'", a.class, a.name))?;
            for p in ins.iter().chain(outs) {
                ports.insert((a.name.as_str(), p), 0);
            }
        }
        for c in &self.connections {
            if c.src == c.dst {
                return Err(format!("Self loop on actor '{}'", c.src));
            }
            for (actor, port, want_output) in [(&c.src, &c.src_port, true), (&c.dst, &c.dst_port, false)] {
                let class = self
                    .actors
                    .iter()
                    .find(|a| &a.name == actor)
                    .map(|a| a.class.as_str())
                    .ok_or_else(|| format!("Connection references unknown actor '{actor}'"))?;
                let (ins, outs) = class_ports(class).unwrap();
                let list = if want_output { outs } else { ins };
                if !list.contains(&port.as_str()) {
                    return Err(format!("Actor '{actor}' has no port '{port}'"));
                }
                *ports.get_mut(&(actor.as_str(), port.as_str())).unwrap() += 1;
            }
        }
        for a in &self.actors {
            let (ins, outs) = class_ports(&a.class).unwrap();
            for p in ins.iter().chain(outs) {
                match ports[&(a.name.as_str(), *p)] {
                    0 => return Err(format!("Port '{p}' of actor '{}' unconnected", a.name)),
                    1 => {}
                    _ => return Err(format!("Port '{p}' of actor '{}' connected more than once", a.name)),
                }
            }
        }
        Ok(())
    }
}

impl DataflowGraph {
    pub fn actor_index(&self, name: &str) -> Option<usize> {
        self.actors.iter().position(|a| a.name == name)
    }

    pub fn connection(&self, c: &Channel) -> Connection {
        Connection {
            src: self.actors[c.src].name.clone(),
            src_port: c.src_port.clone(),
            dst: self.actors[c.dst].name.clone(),
            dst_port: c.dst_port.clone(),
        }
    }

    pub fn skeleton(&self) -> GraphSkeleton {
        GraphSkeleton {
            name: self.name.clone(),
            actors: self
                .actors
                .iter()
                .map(|a| ActorSkeleton {
                    name: a.name.clone(),
                    class: a.kind.class().to_string(),
                    params: a.kind.parameters(),
                })
                .collect(),
            connections: self.channels.iter().map(|c| self.connection(c)).collect(),
        }
    }

    /// Structural checks plus connectivity.
    pub fn validate(&self) -> Result<(), SimError> {
        self.skeleton().validate().map_err(SimError::InvalidGraph)?;
        if self.actors.is_empty() {
            return Err(SimError::InvalidGraph("graph has no actors".into()));
        }
        // undirected reachability from actor 0
        let mut seen = vec![false; self.actors.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for c in &self.channels {
                for (from, to) in [(c.src, c.dst), (c.dst, c.src)] {
                    if from == a && !seen[to] {
                        seen[to] = true;
                        stack.push(to);
                    }
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(SimError::InvalidGraph(format!(
                "actor '{}' is not connected to the graph",
                self.actors[i].name
            )));
        }
        let sources = self.actors.iter().filter(|a| matches!(a.kind, ActorKind::Source { .. })).count();
        let sinks = self.actors.iter().filter(|a| matches!(a.kind, ActorKind::Sink { .. })).count();
        if sources != 1 || sinks != 1 {
            return Err(SimError::InvalidGraph(format!("{sources} sources and {sinks} sinks")));
        }
        Ok(())
    }

    pub fn source(&self) -> usize {
        self.actors.iter().position(|a| matches!(a.kind, ActorKind::Source { .. })).expect("graph has a source")
    }

    pub fn sink(&self) -> usize {
        self.actors.iter().position(|a| matches!(a.kind, ActorKind::Sink { .. })).expect("graph has a sink")
    }

    pub fn input_shape(&self) -> Shape {
        match self.actors[self.source()].kind {
            ActorKind::Source { shape, .. } => shape,
            _ => unreachable!(),
        }
    }

    pub fn output_shape(&self) -> Shape {
        match self.actors[self.sink()].kind {
            ActorKind::Sink { shape, .. } => shape,
            _ => unreachable!(),
        }
    }

    pub fn parameter_bits(&self) -> u64 {
        self.actors.iter().map(|a| a.kind.parameter_bits()).sum()
    }
}

/// Incremental builder used by [`build_dataflow`] and the composer.
#[derive(Debug)]
pub struct GraphBuilder {
    graph: DataflowGraph,
    capacity: usize,
}

impl GraphBuilder {
    pub fn new(name: &str, capacity: usize) -> Self {
        Self {
            graph: DataflowGraph {
                name: name.to_string(),
                actors: Vec::new(),
                channels: Vec::new(),
            },
            capacity,
        }
    }

    pub fn actor(&mut self, name: impl Into<String>, kind: ActorKind) -> usize {
        self.graph.actors.push(Actor { name: name.into(), kind });
        self.graph.actors.len() - 1
    }

    pub fn connect(&mut self, src: usize, src_port: &str, dst: usize, dst_port: &str) {
        let format = self.graph.actors[src]
            .kind
            .output_format()
            .expect("producer has an output");
        self.graph.channels.push(Channel {
            src,
            src_port: src_port.to_string(),
            dst,
            dst_port: dst_port.to_string(),
            capacity: self.capacity,
            format,
        });
    }

    pub fn finish(self) -> Result<DataflowGraph, SimError> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}

/// Maps each layer of a quantized model to actors: a convolution becomes a
/// line buffer feeding a conv actor, with weight and bias stores on its
/// parameter ports; every other layer is a single actor.
pub fn build_dataflow(model: &QuantizedModel, fifo_capacity: usize) -> Result<DataflowGraph, SimError> {
    if fifo_capacity == 0 {
        return Err(SimError::InvalidGraph("FIFO capacity must be positive".into()));
    }
    let ir = &model.ir;
    let mut b = GraphBuilder::new(&ir.source_name, fifo_capacity);
    let mut prev = b.actor(
        "source",
        ActorKind::Source {
            shape: ir.input_shape,
            format: model.input_format(),
        },
    );
    let missing = |name: &str| SimError::InvalidGraph(format!("layer '{name}' lacks quantized parameters"));
    for (i, layer) in ir.layers.iter().enumerate() {
        let in_fmt = model.edge_formats[i];
        let out_fmt = model.edge_formats[i + 1];
        let q = &model.layers[i];
        let name = layer.name.as_str();
        let next = match layer.op {
            LayerOp::Conv { kernel, stride, pad, .. } => {
                let weights = q.weights.clone().ok_or_else(|| missing(name))?;
                let bias = q.bias.clone().ok_or_else(|| missing(name))?;
                let formats = MacFormats {
                    input: in_fmt,
                    weight: weights.format,
                    bias: bias.format,
                    output: out_fmt,
                };
                let lb = b.actor(
                    format!("{name}_linebuffer"),
                    ActorKind::LineBuffer {
                        input: layer.input_shape,
                        kernel,
                        stride,
                        pad,
                        format: in_fmt,
                    },
                );
                let ws = b.actor(format!("{name}_weights"), ActorKind::WeightStore { weights });
                let bs = b.actor(format!("{name}_bias"), ActorKind::BiasStore { bias });
                let conv = b.actor(
                    name,
                    ActorKind::Conv {
                        input: layer.input_shape,
                        output: layer.output_shape,
                        kernel,
                        formats,
                    },
                );
                b.connect(prev, "out", lb, "in");
                b.connect(lb, "out", conv, "in");
                b.connect(ws, "out", conv, "weights");
                b.connect(bs, "out", conv, "bias");
                prev = conv;
                continue;
            }
            LayerOp::MaxPool { window, stride } => ActorKind::MaxPool {
                input: layer.input_shape,
                output: layer.output_shape,
                window,
                stride,
                format: in_fmt,
            },
            LayerOp::ScaleShift => ActorKind::ScaleShift {
                shape: layer.input_shape,
                scale: q.scale.clone().ok_or_else(|| missing(name))?,
                shift: q.bias.clone().ok_or_else(|| missing(name))?,
                input_format: in_fmt,
                output_format: out_fmt,
            },
            LayerOp::Relu => ActorKind::Relu {
                shape: layer.input_shape,
                format: in_fmt,
            },
            LayerOp::Flatten => ActorKind::Flatten {
                input: layer.input_shape,
                format: in_fmt,
            },
            LayerOp::FullyConnected { .. } => {
                let weights = q.weights.clone().ok_or_else(|| missing(name))?;
                let bias = q.bias.clone().ok_or_else(|| missing(name))?;
                let formats = MacFormats {
                    input: in_fmt,
                    weight: weights.format,
                    bias: bias.format,
                    output: out_fmt,
                };
                ActorKind::FullyConnected { weights, bias, formats }
            }
        };
        let a = b.actor(name, next);
        b.connect(prev, "out", a, "in");
        prev = a;
    }
    let sink = b.actor(
        "sink",
        ActorKind::Sink {
            shape: ir.output_shape,
            format: model.output_format(),
        },
    );
    b.connect(prev, "out", sink, "in");
    b.finish()
}

//! Actor runtime and schedulers.
//!
//! The default scheduler is a round-robin tick loop: in every tick each actor
//! gets one chance to fire, tokens produced in a tick become visible in the
//! next one, and space checks use the occupancy at the start of the tick.
//! [`Schedule::Random`] fires actors in a seeded random order with immediate
//! visibility; it exists to exercise the determinacy of the network and its
//! tick counts carry no timing meaning.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ir::Shape;

use super::arith::{mac, MacFormats};
use super::graph::{ActorKind, DataflowGraph};
use super::window::{WindowAssembler, WindowGeometry};
use super::SimError;

pub type Token = Arc<[i32]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    RoundRobin,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimulationMetrics {
    pub latency_cycles: u64,
    pub interval_cycles: u64,
    pub mult_total: u64,
    pub mult_zero_skippable: u64,
}

impl SimulationMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Token accounting of one channel after a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLedger {
    pub channel: String,
    pub produced: u64,
    pub consumed: u64,
    pub occupancy: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    /// One output per image, in CHW order.
    pub outputs: Vec<Vec<i32>>,
    /// Tick at which each image's first token left the source.
    pub start_ticks: Vec<u64>,
    /// Tick at which each image's last token reached the sink.
    pub completion_ticks: Vec<u64>,
    /// Tick at which every channel has consumed all of each image's tokens.
    pub done_ticks: Vec<u64>,
    pub ticks: u64,
    /// Multiplication counts per image.
    pub mult_total: u64,
    pub mult_zero_skippable: u64,
    pub ledger: Vec<ChannelLedger>,
}

impl StreamResult {
    pub fn metrics(&self) -> SimulationMetrics {
        let n = self.completion_ticks.len();
        let latency = self.done_ticks[0] - self.start_ticks[0];
        let interval = if n >= 2 {
            self.done_ticks[n - 1] - self.done_ticks[n - 2]
        } else {
            latency
        };
        SimulationMetrics {
            latency_cycles: latency,
            interval_cycles: interval,
            mult_total: self.mult_total,
            mult_zero_skippable: self.mult_zero_skippable,
        }
    }
}

struct Fifo {
    queue: VecDeque<Token>,
    staged: Vec<Token>,
    /// Occupancy used for space checks until the next commit.
    reserved: usize,
    capacity: usize,
    produced: u64,
    consumed: u64,
    /// Tokens consumed per image.
    per_image: u64,
    /// Tick at which each image's last token was consumed.
    drained: Vec<u64>,
}

impl Fifo {
    fn has_space(&self, n: usize) -> bool {
        self.reserved + self.staged.len() + n <= self.capacity
    }

    fn commit(&mut self) {
        self.queue.extend(self.staged.drain(..));
        self.reserved = self.queue.len();
    }
}

enum State {
    Source {
        pending: VecDeque<Token>,
        per_image: usize,
        emitted: usize,
    },
    Store {
        token: Token,
    },
    Windowed {
        asm: WindowAssembler,
        pending: VecDeque<Token>,
        pool: bool,
    },
    Conv {
        formats: MacFormats,
        window_len: usize,
    },
    ScaleShift {
        scale: Vec<i32>,
        shift: Vec<i32>,
        formats: MacFormats,
    },
    Relu,
    Route,
    Flatten {
        chw: Option<(usize, usize)>,
        buffer: Vec<Token>,
    },
    FullyConnected {
        weights: Vec<i32>,
        bias: Vec<i32>,
        in_features: usize,
        formats: MacFormats,
    },
    Sink {
        shape: Shape,
        current: Vec<Token>,
    },
}

struct Node {
    state: State,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

/// Executable instance of a [`DataflowGraph`].
pub struct Simulator<'g> {
    graph: &'g DataflowGraph,
    nodes: Vec<Node>,
    fifos: Vec<Fifo>,
    tick: u64,
    mult_total: u64,
    mult_zero: u64,
    start_ticks: Vec<u64>,
    completion_ticks: Vec<u64>,
    outputs: Vec<Vec<i32>>,
}

fn geometry(shape: Shape, kernel: usize, stride: usize, pad: usize) -> WindowGeometry {
    let Shape::Chw { c, h, w } = shape else {
        panic!("windowed actor on a flat shape");
    };
    WindowGeometry {
        channels: c,
        height: h,
        width: w,
        kernel,
        stride,
        pad,
    }
}

/// Splits a CHW tensor into pixel tokens (or a single token for flat shapes).
pub fn to_tokens(shape: Shape, data: &[i32]) -> Vec<Token> {
    match shape {
        Shape::Flat(_) => vec![data.into()],
        Shape::Chw { c, h, w } => (0..h * w)
            .map(|t| (0..c).map(|ch| data[ch * h * w + t]).collect::<Vec<_>>().into())
            .collect(),
    }
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(shape: Shape, tokens: &[Token]) -> Vec<i32> {
    match shape {
        Shape::Flat(_) => tokens[0].to_vec(),
        Shape::Chw { c, h, w } => {
            let mut out = vec![0; c * h * w];
            for (t, tok) in tokens.iter().enumerate() {
                for ch in 0..c {
                    out[ch * h * w + t] = tok[ch];
                }
            }
            out
        }
    }
}

/// Tokens the consumer of channel `c` reads per image; pass-through routes
/// take the rate of the channel they feed.
fn consumption_per_image(graph: &DataflowGraph, c: usize) -> u64 {
    let ch = &graph.channels[c];
    let n = match &graph.actors[ch.dst].kind {
        ActorKind::Route { .. } => {
            let next = graph
                .channels
                .iter()
                .position(|o| o.src == ch.dst)
                .expect("validated graph connects every port");
            return consumption_per_image(graph, next);
        }
        ActorKind::LineBuffer { input, .. } | ActorKind::MaxPool { input, .. } | ActorKind::Flatten { input, .. } => {
            input.tokens()
        }
        ActorKind::Conv { output, .. } => output.tokens(),
        ActorKind::ScaleShift { shape, .. } | ActorKind::Relu { shape, .. } | ActorKind::Sink { shape, .. } => {
            shape.tokens()
        }
        ActorKind::FullyConnected { .. } => 1,
        ActorKind::Source { .. } | ActorKind::WeightStore { .. } | ActorKind::BiasStore { .. } => {
            unreachable!("actor has no inputs")
        }
    };
    n as u64
}

impl<'g> Simulator<'g> {
    pub fn new(graph: &'g DataflowGraph) -> Result<Self, SimError> {
        graph.validate()?;
        let fifos = graph
            .channels
            .iter()
            .map(|c| Fifo {
                queue: VecDeque::new(),
                staged: Vec::new(),
                reserved: 0,
                capacity: c.capacity,
                produced: 0,
                consumed: 0,
                per_image: 0,
                drained: Vec::new(),
            })
            .collect::<Vec<_>>();
        let mut fifos = fifos;
        for (i, f) in fifos.iter_mut().enumerate() {
            f.per_image = consumption_per_image(graph, i);
        }
        let mut nodes = Vec::with_capacity(graph.actors.len());
        for (i, actor) in graph.actors.iter().enumerate() {
            let port_channel = |port: &str, input: bool| {
                graph
                    .channels
                    .iter()
                    .position(|c| {
                        if input {
                            c.dst == i && c.dst_port == port
                        } else {
                            c.src == i && c.src_port == port
                        }
                    })
                    .expect("validated graph connects every port")
            };
            let inputs = actor.kind.input_ports().iter().map(|p| port_channel(p, true)).collect();
            let outputs = actor.kind.output_ports().iter().map(|p| port_channel(p, false)).collect();
            let state = match &actor.kind {
                ActorKind::Source { shape, .. } => State::Source {
                    pending: VecDeque::new(),
                    per_image: shape.tokens(),
                    emitted: 0,
                },
                ActorKind::WeightStore { weights: t } | ActorKind::BiasStore { bias: t } => State::Store {
                    token: t.codes.as_slice().into(),
                },
                ActorKind::LineBuffer { input, kernel, stride, pad, .. } => State::Windowed {
                    asm: WindowAssembler::new(geometry(*input, *kernel, *stride, *pad)),
                    pending: VecDeque::new(),
                    pool: false,
                },
                ActorKind::MaxPool { input, window, stride, .. } => State::Windowed {
                    asm: WindowAssembler::new(geometry(*input, *window, *stride, 0)),
                    pending: VecDeque::new(),
                    pool: true,
                },
                ActorKind::Conv { input, kernel, formats, .. } => State::Conv {
                    formats: *formats,
                    window_len: input.channels() * kernel * kernel,
                },
                ActorKind::ScaleShift { scale, shift, input_format, output_format, .. } => State::ScaleShift {
                    scale: scale.codes.clone(),
                    shift: shift.codes.clone(),
                    formats: MacFormats {
                        input: *input_format,
                        weight: scale.format,
                        bias: shift.format,
                        output: *output_format,
                    },
                },
                ActorKind::Relu { .. } => State::Relu,
                ActorKind::Route { .. } => State::Route,
                ActorKind::Flatten { input, .. } => State::Flatten {
                    chw: match *input {
                        Shape::Chw { c, h, w } => Some((c, h * w)),
                        Shape::Flat(_) => None,
                    },
                    buffer: Vec::new(),
                },
                ActorKind::FullyConnected { weights, bias, formats } => State::FullyConnected {
                    weights: weights.codes.clone(),
                    bias: bias.codes.clone(),
                    in_features: weights.shape[1],
                    formats: *formats,
                },
                ActorKind::Sink { shape, .. } => State::Sink {
                    shape: *shape,
                    current: Vec::new(),
                },
            };
            nodes.push(Node { state, inputs, outputs });
        }
        Ok(Self {
            graph,
            nodes,
            fifos,
            tick: 0,
            mult_total: 0,
            mult_zero: 0,
            start_ticks: Vec::new(),
            completion_ticks: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Streams `images` (CHW codes) back to back and runs to quiescence.
    pub fn run(mut self, images: &[Vec<i32>], schedule: Schedule) -> Result<StreamResult, SimError> {
        if images.is_empty() {
            return Err(SimError::NoImages);
        }
        let shape = self.graph.input_shape();
        let src = self.graph.source();
        let State::Source { pending, .. } = &mut self.nodes[src].state else {
            unreachable!()
        };
        for img in images {
            if img.len() != shape.len() {
                return Err(SimError::InputLength {
                    expected: shape.len(),
                    actual: img.len(),
                });
            }
            pending.extend(to_tokens(shape, img));
        }

        match schedule {
            Schedule::RoundRobin => self.run_ticks(),
            Schedule::Random { seed } => self.run_random(seed),
        }

        if self.outputs.len() != images.len() {
            return Err(SimError::DeadlockDetected {
                dump: self.occupancy_dump(),
            });
        }
        let done_ticks = (0..images.len())
            .map(|i| self.fifos.iter().map(|f| f.drained[i]).max().unwrap_or(self.completion_ticks[i]))
            .collect();
        let n = images.len() as u64;
        let ledger = self
            .graph
            .channels
            .iter()
            .zip(&self.fifos)
            .map(|(c, f)| ChannelLedger {
                channel: self.graph.connection(c).to_string(),
                produced: f.produced,
                consumed: f.consumed,
                occupancy: f.queue.len(),
            })
            .collect();
        Ok(StreamResult {
            outputs: self.outputs,
            start_ticks: self.start_ticks,
            completion_ticks: self.completion_ticks,
            done_ticks,
            ticks: self.tick,
            mult_total: self.mult_total / n,
            mult_zero_skippable: self.mult_zero / n,
            ledger,
        })
    }

    fn run_ticks(&mut self) {
        loop {
            let mut fired = false;
            for a in 0..self.nodes.len() {
                fired |= self.fire(a);
            }
            self.fifos.iter_mut().for_each(Fifo::commit);
            if !fired {
                break;
            }
            self.tick += 1;
        }
    }

    fn run_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        loop {
            order.shuffle(&mut rng);
            let mut fired = false;
            for &a in &order {
                if rng.random_bool(0.6) && self.fire(a) {
                    fired = true;
                    self.commit_node(a);
                }
            }
            if !fired {
                // a full pass decides quiescence
                for &a in &order {
                    if self.fire(a) {
                        fired = true;
                        self.commit_node(a);
                    }
                }
                if !fired {
                    break;
                }
            }
            self.tick += 1;
        }
    }

    fn commit_node(&mut self, a: usize) {
        for &c in self.nodes[a].inputs.iter().chain(&self.nodes[a].outputs) {
            self.fifos[c].commit();
        }
    }

    fn occupancy_dump(&self) -> String {
        let mut s = String::new();
        for (c, f) in self.graph.channels.iter().zip(&self.fifos) {
            let _ = write!(s, "{} [{}/{}]; ", self.graph.connection(c), f.queue.len(), f.capacity);
        }
        s.trim_end_matches("; ").to_string()
    }

    fn available(&self, c: usize) -> bool {
        !self.fifos[c].queue.is_empty()
    }

    fn pop(&mut self, c: usize) -> Token {
        let f = &mut self.fifos[c];
        f.consumed += 1;
        if f.consumed.is_multiple_of(f.per_image) {
            f.drained.push(self.tick);
        }
        f.queue.pop_front().expect("availability checked")
    }

    fn push(&mut self, c: usize, t: Token) {
        let f = &mut self.fifos[c];
        f.produced += 1;
        f.staged.push(t);
    }

    /// Attempts one firing of actor `a`; returns whether it fired.
    fn fire(&mut self, a: usize) -> bool {
        let tick = self.tick;
        let ins = std::mem::take(&mut self.nodes[a].inputs);
        let outs = std::mem::take(&mut self.nodes[a].outputs);
        let has_space = |s: &Self, n: usize| s.fifos[outs[0]].has_space(n);
        // Temporarily take the state to sidestep borrowing self twice.
        let mut state = std::mem::replace(&mut self.nodes[a].state, State::Relu);
        let fired = match &mut state {
            State::Source { pending, per_image, emitted } => {
                if !pending.is_empty() && has_space(self, 1) {
                    if *emitted % *per_image == 0 {
                        self.start_ticks.push(tick);
                    }
                    let t = pending.pop_front().unwrap();
                    self.push(outs[0], t);
                    *emitted += 1;
                    true
                } else {
                    false
                }
            }
            State::Store { token } => {
                if has_space(self, 1) {
                    self.push(outs[0], token.clone());
                    true
                } else {
                    false
                }
            }
            State::Windowed { asm, pending, pool } => {
                let mut fired = false;
                if pending.is_empty() && self.available(ins[0]) {
                    let t = self.pop(ins[0]);
                    let k2 = asm.geometry().kernel * asm.geometry().kernel;
                    for w in asm.push(t) {
                        let token: Token = if *pool {
                            w.chunks(k2).map(|c| *c.iter().max().unwrap()).collect::<Vec<_>>().into()
                        } else {
                            w.into()
                        };
                        pending.push_back(token);
                    }
                    fired = true;
                }
                if !pending.is_empty() && has_space(self, 1) {
                    let t = pending.pop_front().unwrap();
                    self.push(outs[0], t);
                    fired = true;
                }
                fired
            }
            State::Conv { formats, window_len } => {
                if ins.iter().all(|&c| self.available(c)) && has_space(self, 1) {
                    let window = self.pop(ins[0]);
                    let weights = self.pop(ins[1]);
                    let bias = self.pop(ins[2]);
                    let n = *window_len;
                    let mut out = Vec::with_capacity(bias.len());
                    for (o, &b) in bias.iter().enumerate() {
                        let (code, zeros) = mac(&window, &weights[o * n..(o + 1) * n], b, formats);
                        self.mult_zero += zeros;
                        out.push(code);
                    }
                    self.mult_total += (n * bias.len()) as u64;
                    self.push(outs[0], out.into());
                    true
                } else {
                    false
                }
            }
            State::ScaleShift { scale, shift, formats } => {
                if self.available(ins[0]) && has_space(self, 1) {
                    let x = self.pop(ins[0]);
                    let y: Vec<i32> = x
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| mac(&[v], &[scale[i]], shift[i], formats).0)
                        .collect();
                    self.push(outs[0], y.into());
                    true
                } else {
                    false
                }
            }
            State::Relu => {
                if self.available(ins[0]) && has_space(self, 1) {
                    let x = self.pop(ins[0]);
                    let y: Vec<i32> = x.iter().map(|&v| v.max(0)).collect();
                    self.push(outs[0], y.into());
                    true
                } else {
                    false
                }
            }
            State::Route => {
                if self.available(ins[0]) && has_space(self, 1) {
                    let x = self.pop(ins[0]);
                    self.push(outs[0], x);
                    true
                } else {
                    false
                }
            }
            State::Flatten { chw, buffer } => match *chw {
                None => {
                    if self.available(ins[0]) && has_space(self, 1) {
                        let x = self.pop(ins[0]);
                        self.push(outs[0], x);
                        true
                    } else {
                        false
                    }
                }
                Some((c, hw)) => {
                    let completes = buffer.len() + 1 == hw;
                    if self.available(ins[0]) && (!completes || has_space(self, 1)) {
                        buffer.push(self.pop(ins[0]));
                        if completes {
                            let mut flat = vec![0; c * hw];
                            for (t, tok) in buffer.iter().enumerate() {
                                for ch in 0..c {
                                    flat[ch * hw + t] = tok[ch];
                                }
                            }
                            buffer.clear();
                            self.push(outs[0], flat.into());
                        }
                        true
                    } else {
                        false
                    }
                }
            },
            State::FullyConnected { weights, bias, in_features, formats } => {
                if self.available(ins[0]) && has_space(self, 1) {
                    let x = self.pop(ins[0]);
                    let n = *in_features;
                    let mut out = Vec::with_capacity(bias.len());
                    for (o, &b) in bias.iter().enumerate() {
                        let (code, zeros) = mac(&x, &weights[o * n..(o + 1) * n], b, formats);
                        self.mult_zero += zeros;
                        out.push(code);
                    }
                    self.mult_total += (n * bias.len()) as u64;
                    self.push(outs[0], out.into());
                    true
                } else {
                    false
                }
            }
            State::Sink { shape, current } => {
                if self.available(ins[0]) {
                    current.push(self.pop(ins[0]));
                    if current.len() == shape.tokens() {
                        self.outputs.push(from_tokens(*shape, current));
                        self.completion_ticks.push(tick);
                        current.clear();
                    }
                    true
                } else {
                    false
                }
            }
        };
        let node = &mut self.nodes[a];
        node.state = state;
        node.inputs = ins;
        node.outputs = outs;
        fired
    }
}

/// Runs a stream of images through `graph` with the round-robin scheduler.
pub fn run_stream(graph: &DataflowGraph, images: &[Vec<i32>]) -> Result<StreamResult, SimError> {
    Simulator::new(graph)?.run(images, Schedule::RoundRobin)
}

/// Runs one image; the image is streamed twice so that the steady-state
/// interval can be measured. Outputs and counters refer to one image.
pub fn run_image(graph: &DataflowGraph, image: &[i32]) -> Result<(Vec<i32>, SimulationMetrics), SimError> {
    let r = run_stream(graph, &[image.to_vec(), image.to_vec()])?;
    let metrics = r.metrics();
    Ok((r.outputs.into_iter().next().unwrap(), metrics))
}

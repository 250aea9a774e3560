//! Random model and graph generators for property tests.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::compose::{Chain, ChainLink};
use crate::ir::{LayerNode, LayerOp, ModelIR, Shape, Tensor};
use crate::quant::{quantize_model, Datatype, QuantConfig, QuantizedModel};
use crate::sim::{build_dataflow, Actor, ActorKind, DataflowGraph};

/// Bounds for [`random_ir`].
#[derive(Debug, Clone, Copy)]
pub struct ModelBounds {
    pub max_layers: usize,
    pub max_channels: usize,
    pub max_extent: usize,
    pub kernels: &'static [usize],
    pub strides: &'static [usize],
}

impl Default for ModelBounds {
    fn default() -> Self {
        Self {
            max_layers: 3,
            max_channels: 8,
            max_extent: 16,
            kernels: &[1, 3, 5],
            strides: &[1, 2],
        }
    }
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A random layer chain with `1..=max_layers` layers.
pub fn random_ir(rng: &mut impl Rng, bounds: &ModelBounds) -> ModelIR {
    let c = rng.random_range(1..=bounds.max_channels.min(4));
    let h = rng.random_range(4..=bounds.max_extent);
    let w = rng.random_range(4..=bounds.max_extent);
    let input = Shape::chw(c, h, w);
    let count = rng.random_range(1..=bounds.max_layers);
    let mut layers = Vec::new();
    let mut shape = input;
    while layers.len() < count {
        let idx = layers.len();
        let layer = match (rng.random_range(0..6), shape) {
            (0 | 1, Shape::Chw { c, h, w }) => {
                let fitting: Vec<usize> = bounds.kernels.iter().copied().filter(|&k| k <= h.min(w) + 2 * (k / 2)).collect();
                let Some(&k) = fitting.choose(rng) else { continue };
                let pad = rng.random_range(0..=k / 2);
                if h + 2 * pad < k || w + 2 * pad < k {
                    continue;
                }
                let s = *bounds.strides.choose(rng).unwrap();
                let out = rng.random_range(1..=bounds.max_channels);
                let weights = Tensor::new(vec![out, c, k, k], uniform(rng, out * c * k * k, -1.0, 1.0));
                LayerNode::conv(&format!("conv{idx}"), weights, uniform(rng, out, -0.5, 0.5), s, pad)
            }
            (2, Shape::Chw { h, w, .. }) if h >= 2 && w >= 2 => {
                LayerNode::new(&format!("pool{idx}"), LayerOp::MaxPool { window: 2, stride: 2 })
            }
            (3, s) => {
                let n = s.channels();
                LayerNode::scale_shift(&format!("bn{idx}"), uniform(rng, n, 0.25, 2.0), uniform(rng, n, -0.5, 0.5))
            }
            (4, _) => LayerNode::new(&format!("relu{idx}"), LayerOp::Relu),
            (5, s) if s.len() <= 2048 => {
                if let Shape::Chw { .. } = s {
                    layers.push(LayerNode::new(&format!("flatten{idx}"), LayerOp::Flatten));
                }
                let n = s.len();
                let out = rng.random_range(1..=10);
                let weights = Tensor::new(vec![out, n], uniform(rng, out * n, -0.5, 0.5));
                LayerNode::fully_connected(&format!("fc{idx}"), weights, uniform(rng, out, -0.5, 0.5))
            }
            _ => continue,
        };
        layers.push(layer);
        shape = ModelIR::new("probe", input, layers.clone())
            .expect("generator builds valid layers")
            .output_shape;
    }
    ModelIR::new("random", input, layers).expect("generator builds valid layers")
}

/// Quantizes `ir` with a random datatype, calibrating on random images.
pub fn random_quantized(rng: &mut impl Rng, ir: &ModelIR) -> QuantizedModel {
    let act = *[8u32, 16, 32].choose(rng).unwrap();
    let weight = *[2u32, 4, 8, 16].choose(rng).unwrap();
    let cfg = QuantConfig::new(Datatype::new(act, weight).unwrap());
    let calib: Vec<Vec<f32>> = (0..4).map(|_| random_image(rng, ir)).collect();
    quantize_model(ir, &cfg, &calib).expect("random model quantizes")
}

pub fn random_image(rng: &mut impl Rng, ir: &ModelIR) -> Vec<f32> {
    uniform(rng, ir.input_shape.len(), -1.0, 1.0)
}

/// Random input codes in the model's input format.
pub fn random_input(rng: &mut impl Rng, model: &QuantizedModel) -> Vec<i32> {
    let img = random_image(rng, &model.ir);
    model.quantize_input(&img)
}

/// A random model, quantized, and its dataflow graph.
pub fn random_graph(rng: &mut impl Rng, capacity: usize) -> (QuantizedModel, DataflowGraph) {
    let ir = random_ir(rng, &ModelBounds::default());
    let q = random_quantized(rng, &ir);
    let g = build_dataflow(&q, capacity).expect("random model maps to a graph");
    (q, g)
}

fn perturb(codes: &mut [i32], rng: &mut impl Rng, min: i64, max: i64) {
    let i = rng.random_range(0..codes.len());
    let old = i64::from(codes[i]);
    codes[i] = if old < max { old + 1 } else { old - 1 }.clamp(min, max) as i32;
}

/// A variant of `g` sharing a prefix and suffix with it: one parameter store
/// or parameterized actor is perturbed, or a ReLU is inserted or removed.
pub fn mutate_graph(rng: &mut impl Rng, g: &DataflowGraph, name: &str) -> DataflowGraph {
    let mut chain = Chain::from_graph(g).expect("generated graphs are chains");
    chain.name = name.to_string();
    let n = chain.links.len();
    let parametric: Vec<usize> = (0..n)
        .filter(|&i| {
            let l = &chain.links[i];
            !l.sides.is_empty() || !l.actor.kind.parameter_tensors().is_empty()
        })
        .collect();
    let relus: Vec<usize> = (0..n)
        .filter(|&i| matches!(chain.links[i].actor.kind, ActorKind::Relu { .. }))
        .collect();
    let insertable: Vec<usize> = (0..n - 1).filter(|&i| chain.links[i].actor.kind.output_shape().is_some()).collect();
    loop {
        match rng.random_range(0..3) {
            0 if !parametric.is_empty() => {
                let i = *parametric.choose(rng).unwrap();
                let link = &mut chain.links[i];
                let kind = if link.sides.is_empty() {
                    &mut link.actor.kind
                } else {
                    let s = rng.random_range(0..link.sides.len());
                    &mut link.sides[s].1.kind
                };
                let tensor = match kind {
                    ActorKind::WeightStore { weights: t } | ActorKind::BiasStore { bias: t } => t,
                    ActorKind::ScaleShift { scale, shift, .. } => if rng.random_bool(0.5) { scale } else { shift },
                    ActorKind::FullyConnected { weights, bias, .. } => if rng.random_bool(0.5) { weights } else { bias },
                    _ => unreachable!(),
                };
                let (min, max) = (tensor.format.min_code(), tensor.format.max_code());
                perturb(&mut tensor.codes, rng, min, max);
            }
            1 if !relus.is_empty() => {
                chain.links.remove(*relus.choose(rng).unwrap());
            }
            2 if !insertable.is_empty() => {
                let i = *insertable.choose(rng).unwrap();
                let prev = &chain.links[i].actor.kind;
                let relu = ActorKind::Relu {
                    shape: prev.output_shape().unwrap(),
                    format: prev.output_format().unwrap(),
                };
                chain.links.insert(
                    i + 1,
                    ChainLink {
                        actor: Actor {
                            name: format!("relu_ins{i}"),
                            kind: relu,
                        },
                        sides: vec![],
                    },
                );
            }
            _ => continue,
        }
        return chain.to_graph().expect("mutation keeps the chain valid");
    }
}

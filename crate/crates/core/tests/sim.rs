use onnx2hls::ir::{LayerNode, LayerOp, ModelIR, Shape, Tensor};
use onnx2hls::quant::{quantize_model, Datatype, QuantConfig};
use onnx2hls::sim::{
    build_dataflow, reference_inference, run_image, run_stream, ActorKind, Schedule, SimError, Simulator,
};
use onnx2hls::testing::{random_graph, random_input};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quantized(ir: &ModelIR, d: &str) -> onnx2hls::quant::QuantizedModel {
    let calib = vec![vec![0.9; ir.input_shape.len()], vec![-0.9; ir.input_shape.len()]];
    quantize_model(ir, &QuantConfig::new(d.parse::<Datatype>().unwrap()), &calib).unwrap()
}

#[test]
fn single_conv_maps_to_template_actors() {
    let w = Tensor::new(vec![2, 1, 3, 3], vec![0.1; 18]);
    let ir = ModelIR::new("c", Shape::chw(1, 5, 5), vec![LayerNode::conv("conv0", w, vec![0.0, 0.2], 1, 0)]).unwrap();
    let g = build_dataflow(&quantized(&ir, "D16-W8"), 64).unwrap();
    let classes: Vec<&str> = g.actors.iter().map(|a| a.kind.class()).collect();
    assert_eq!(classes, ["Source", "LineBuffer", "WeightStore", "BiasStore", "Conv", "Sink"]);
    assert_eq!(g.channels.len(), 5);
}

#[test]
fn passthrough_latency_equals_token_count() {
    let ir = ModelIR::new("p", Shape::chw(1, 4, 4), vec![]).unwrap();
    let q = quantized(&ir, "D8-W8");
    let g = build_dataflow(&q, 64).unwrap();
    assert_eq!(g.actors.len(), 2);
    assert_eq!(g.channels.len(), 1);
    let img: Vec<i32> = (0..16).collect();
    let (out, m) = run_image(&g, &img).unwrap();
    assert_eq!(out, img);
    assert_eq!(m.latency_cycles, 16);
    assert!(m.interval_cycles <= m.latency_cycles);
}

#[test]
fn identity_one_by_one_conv() {
    let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
    let ir = ModelIR::new("id", Shape::chw(1, 3, 3), vec![LayerNode::conv("conv0", w, vec![0.0], 1, 0)]).unwrap();
    let q = quantized(&ir, "D8-W8");
    let img: Vec<i32> = (-4..5).collect();
    assert_eq!(reference_inference(&q, &img), img);
    assert_eq!(run_image(&build_dataflow(&q, 4).unwrap(), &img).unwrap().0, img);
}

#[test]
fn streaming_matches_reference_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let (q, g) = random_graph(&mut rng, 4);
        let img = random_input(&mut rng, &q);
        let (out, m) = run_image(&g, &img).unwrap();
        assert_eq!(out, reference_inference(&q, &img), "{:?}", q.ir.layers);
        assert!(m.interval_cycles <= m.latency_cycles, "{m:?} {:?}", q.ir.layers.iter().map(|l| (l.op, l.input_shape, l.output_shape)).collect::<Vec<_>>());
        assert!(m.mult_zero_skippable <= m.mult_total);
    }
}

#[test]
fn tiny_fifos_still_complete() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (q, g) = random_graph(&mut rng, 1);
        let img = random_input(&mut rng, &q);
        assert_eq!(run_image(&g, &img).unwrap().0, reference_inference(&q, &img));
    }
}

#[test]
fn random_schedules_agree_with_round_robin() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..10 {
        let (q, g) = random_graph(&mut rng, 2);
        let imgs = vec![random_input(&mut rng, &q), random_input(&mut rng, &q)];
        let rr = Simulator::new(&g).unwrap().run(&imgs, Schedule::RoundRobin).unwrap();
        let rnd = Simulator::new(&g).unwrap().run(&imgs, Schedule::Random { seed: i }).unwrap();
        assert_eq!(rr.outputs, rnd.outputs);
        assert_eq!(rr.ledger, rnd.ledger);
        for l in &rr.ledger {
            assert_eq!(l.produced, l.consumed + l.occupancy as u64);
        }
    }
}

#[test]
fn zero_mult_ratio_matches_zero_weight_fraction_for_single_conv() {
    let mut data = vec![0.5f32; 2 * 3 * 9];
    for v in data.iter_mut().step_by(3) {
        *v = 0.0;
    }
    let w = Tensor::new(vec![2, 3, 3, 3], data);
    let ir = ModelIR::new("z", Shape::chw(3, 6, 6), vec![LayerNode::conv("conv0", w, vec![0.0; 2], 1, 1)]).unwrap();
    let q = quantized(&ir, "D16-W8");
    let g = build_dataflow(&q, 64).unwrap();
    let (_, m) = run_image(&g, &vec![1; 108]).unwrap();
    assert_eq!(m.mult_total, 2 * 27 * 36);
    assert_eq!(m.mult_zero_skippable as f64 / m.mult_total as f64, q.zero_weight_fraction);
}

#[test]
fn wrong_input_length_is_rejected() {
    let ir = ModelIR::new("p", Shape::Flat(4), vec![LayerNode::new("relu0", LayerOp::Relu)]).unwrap();
    let g = build_dataflow(&quantized(&ir, "D8-W8"), 8).unwrap();
    assert_eq!(
        run_stream(&g, &[vec![1, 2, 3]]).unwrap_err(),
        SimError::InputLength { expected: 4, actual: 3 }
    );
}

#[test]
fn starved_fifo_reports_deadlock() {
    let ir = ModelIR::new("p", Shape::chw(1, 5, 5), vec![]).unwrap();
    let mut g = build_dataflow(&quantized(&ir, "D8-W8"), 8).unwrap();
    // a zero-capacity channel can never accept a token
    g.channels[0].capacity = 0;
    match run_stream(&g, &[vec![0; 25]]) {
        Err(SimError::DeadlockDetected { dump }) => assert!(dump.contains("source.out -> sink.in [0/0]")),
        other => panic!("expected deadlock, got {other:?}"),
    }
    assert!(matches!(g.actors[0].kind, ActorKind::Source { .. }));
}

//! Fixture-level checks across ingest, quantization, simulation and exploration.

use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use onnx2hls::error::load_model;
use onnx2hls::explore::{
    explore, parse_report_table, render_report, EvalSet, ExplorationRow, ExploreOptions, ReportFormat,
};
use onnx2hls::ir::ModelIR;
use onnx2hls::mnist::Mnist;
use onnx2hls::quant::{quantize_model, Datatype, QuantConfig};
use onnx2hls::sim::{argmax, build_dataflow, float_inference, reference_inference, run_image};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

static MNIST: LazyLock<Mnist> = LazyLock::new(|| Mnist::load(&root().join("data/mnist")).unwrap());
static IR: LazyLock<ModelIR> = LazyLock::new(|| load_model(&root().join("fixtures/mnist_cnn.onnx")).unwrap());

#[test]
fn fixture_ir_has_expected_layers() {
    let kinds: Vec<String> = IR.layers.iter().map(|l| format!("{:?}", l.kind())).collect();
    assert_eq!(
        kinds,
        ["Conv", "MaxPool", "ScaleShift", "Relu", "Conv", "MaxPool", "ScaleShift", "Relu", "Flatten", "FullyConnected"]
    );
    assert_eq!(IR.output_shape.len(), 10);
}

#[test]
fn idx_images_decode_to_digits() {
    assert_eq!(MNIST.test.labels[..10], [7, 2, 1, 0, 4, 1, 4, 9, 5, 9]);
    // the float model classifies the first test images correctly
    for i in 0..10 {
        let scores = float_inference(&IR, &MNIST.test.images.normalized(i));
        assert_eq!(argmax(&scores), usize::from(MNIST.test.labels[i]), "image {i}");
    }
}

#[test]
fn wide_fixed_point_tracks_float_predictions() {
    let calib = EvalSet::head(&MNIST.train, 64);
    let q = quantize_model(&IR, &QuantConfig::new("D32-W32".parse().unwrap()), &calib.images).unwrap();
    let g = build_dataflow(&q, 64).unwrap();
    for i in 0..20 {
        let img = MNIST.test.images.normalized(i);
        let codes = q.quantize_input(&img);
        let out = run_image(&g, &codes).unwrap().0;
        assert_eq!(out, reference_inference(&q, &codes));
        assert_eq!(argmax(&out), argmax(&float_inference(&IR, &img)));
    }
}

#[test]
fn sweep_columns_are_consistent_and_reports_read_back() {
    let calib = EvalSet::head(&MNIST.train, 64);
    let eval = EvalSet::sample(&MNIST.test, 40, 7);
    let grid = Datatype::parse_list("D16-W16,D16-W8,D8-W4").unwrap();
    let report = explore(&IR, &grid, &calib, &eval, &ExploreOptions::default()).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.datatype.as_str()).collect();
    assert_eq!(labels, ["D16-W16", "D16-W8", "D8-W4"]);
    for r in &report.rows {
        assert_eq!(r.bram36, r.param_bits.div_ceil(36_864));
        assert!((0.0..=100.0).contains(&r.accuracy_pct));
        assert!(r.interval_cycles <= r.latency_cycles);
    }
    assert_eq!(report.rows[0].param_bits, 2 * report.rows[1].param_bits);
    // the same datatype sweep again is byte-identical
    let again = explore(&IR, &grid, &calib, &eval, &ExploreOptions::default()).unwrap();
    for f in [ReportFormat::Csv, ReportFormat::Markdown] {
        let text = render_report(&report, f);
        assert_eq!(text, render_report(&again, f));
        let rows = parse_report_table(&text).unwrap();
        assert_eq!(rows, report.rows.iter().map(ExplorationRow::rounded).collect::<Vec<_>>());
    }
}

#[test]
fn eval_sampling_is_seeded_and_sorted() {
    let a = EvalSet::sample(&MNIST.test, 100, 3);
    assert_eq!(a, EvalSet::sample(&MNIST.test, 100, 3));
    assert_ne!(a, EvalSet::sample(&MNIST.test, 100, 4));
    assert_eq!(EvalSet::sample(&MNIST.test, 20_000, 0).len(), 10_000);
}

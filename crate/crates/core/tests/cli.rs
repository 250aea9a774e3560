use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture() -> String {
    root().join("fixtures/mnist_cnn.onnx").display().to_string()
}

fn mnist() -> String {
    root().join("data/mnist").display().to_string()
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onnx2hls")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero_and_lists_flags() {
    let expected: [(&str, &[&str]); 6] = [
        ("parse", &["--dump-ir"]),
        ("quantize", &["--model", "--datatype", "--mnist", "--calib", "--quantized", "--out"]),
        ("simulate", &["--images", "--fifo", "--random-schedule", "--seed"]),
        ("compose", &["--model", "--datatypes", "--check", "--out"]),
        ("emit", &["--outdir", "--fifo"]),
        ("explore", &["--grid", "--mnist", "--out", "--format", "--eval", "--full", "--calib", "--seed", "--plot"]),
    ];
    for (sub, flags) in expected {
        let o = cli(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags.iter().chain(&["--config"]) {
            assert!(text.contains(f), "{sub} --help lacks {f}");
        }
    }
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_datatype_is_a_usage_error() {
    let o = cli(&["quantize", "--model", &fixture(), "--datatype", "D7-X2", "--mnist", &mnist()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[usage]:") && err.contains("D7-X2"), "{err}");
}

#[test]
fn unknown_flags_and_grids_are_usage_errors() {
    let o = cli(&["parse", &fixture(), "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[usage]:"));
    let o = cli(&["explore", "--model", &fixture(), "--grid", "D16-W3", "--mnist", &mnist()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn processing_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.onnx");
    std::fs::write(&junk, [0xff, 0xff, 0xff]).unwrap();
    let o = cli(&["parse", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[ingest]:"), "{}", stderr(&o));
    let o = cli(&["parse", "/nonexistent/model.onnx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[io]:"));
    let o = cli(&["quantize", "--model", &fixture(), "--datatype", "D16-W8", "--mnist", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[idx]:"));
}

#[test]
fn parse_dumps_ir_json() {
    let dir = tempfile::tempdir().unwrap();
    let ir = dir.path().join("ir.json");
    let o = cli(&["parse", &fixture(), "--dump-ir", ir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let parsed = onnx2hls::ir::ModelIR::from_json(&std::fs::read_to_string(&ir).unwrap()).unwrap();
    assert_eq!(parsed, onnx2hls::error::load_model(Path::new(&fixture())).unwrap());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["layers"].as_array().unwrap().len(), parsed.layers.len());
}

#[test]
fn quantize_then_emit_from_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.json");
    let o = cli(&["quantize", "--model", &fixture(), "--datatype", "D16-W4", "--mnist", &mnist(), "--out", q.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let out = dir.path().join("hls");
    let o = cli(&["emit", "--quantized", q.to_str().unwrap(), "--outdir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bits: u64 = std::fs::read_dir(out.join("src"))
        .unwrap()
        .map(|e| onnx2hls::codegen::embedded_parameter_bits(&std::fs::read_to_string(e.unwrap().path()).unwrap()))
        .sum();
    assert_eq!(bits, summary["param_bits"].as_u64().unwrap());
    let xdf = std::fs::read_to_string(out.join("topology.xdf")).unwrap();
    assert!(onnx2hls::codegen::parse_topology(&xdf).is_ok());
    assert!(out.join("build.tcl").is_file() && out.join("actors/Conv.actor").is_file());
}

#[test]
fn simulate_reports_predictions() {
    let o = cli(&["simulate", "--model", &fixture(), "--datatype", "D16-W8", "--mnist", &mnist(), "--images", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["predictions"].as_array().unwrap().len(), 4);
    let random = cli(&[
        "simulate", "--model", &fixture(), "--datatype", "D16-W8", "--mnist", &mnist(), "--images", "4",
        "--random-schedule", "--seed", "9",
    ]);
    let w: serde_json::Value = serde_json::from_slice(&random.stdout).unwrap();
    assert_eq!(v["predictions"], w["predictions"]);
}

#[test]
fn compose_checks_every_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("configs.json");
    let o = cli(&[
        "compose", "--model", &fixture(), "--datatypes", "D16-W8,D16-W4", "--mnist", &mnist(), "--check", "2", "--out",
        table.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["mismatches"], 0);
    assert!(v["actors_merged"].as_u64() < v["actors_separate"].as_u64());
    let t = onnx2hls::compose::ConfigTable::from_json(&std::fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(t.configs.len(), 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("r.md");
    std::fs::write(
        &cfg,
        serde_json::json!({"model": fixture(), "mnist": mnist(), "grid": "D16-W16", "eval": 5, "out": out}).to_string(),
    )
    .unwrap();
    let o = cli(&["explore", "--config", cfg.to_str().unwrap(), "--grid", "D16-W8,D16-W2", "--format", "markdown"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = onnx2hls::explore::parse_report_table(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.datatype.as_str()).collect();
    assert_eq!(labels, ["D16-W8", "D16-W2"]);
}

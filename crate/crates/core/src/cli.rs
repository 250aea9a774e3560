//! Command-line front end: `parse`, `quantize`, `simulate`, `compose`, `emit`
//! and `explore`.
//!
//! Exit codes: 0 on success (and `--help`), 1 on usage errors, 2 on data or
//! processing errors. Every failure prints a single `error[code]: message`
//! line to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::codegen::{emit, write_atomic};
use crate::compose::{execute_config, merge};
use crate::error::{load_model, Error, Result};
use crate::explore::{explore, render_report, write_plot, EvalSet, ExploreOptions, ReportFormat};
use crate::ir::ModelIR;
use crate::mnist::Mnist;
use crate::quant::{quantize_model, Datatype, QuantConfig, QuantizedModel};
use crate::sim::{argmax, build_dataflow, Schedule, Simulator, DEFAULT_FIFO_CAPACITY};

#[derive(Debug, Parser)]
#[command(name = "onnx2hls", version, about = "ONNX CNN to streaming dataflow toolchain")]
pub struct Cli {
    /// JSON object of default flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode a model and print its layer IR.
    Parse(ParseArgs),
    /// Quantize a model for one datatype.
    Quantize(QuantizeArgs),
    /// Stream test images through the dataflow graph.
    Simulate(SimulateArgs),
    /// Merge several dataflows into one multi-dataflow.
    Compose(ComposeArgs),
    /// Write HLS sources, build script, topology and actor descriptors.
    Emit(EmitArgs),
    /// Sweep datatypes and report footprint, timing and accuracy.
    Explore(ExploreArgs),
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// ONNX protobuf or JSON mirror.
    #[arg(value_name = "MODEL")]
    pub model: PathBuf,
    /// Write the IR as JSON.
    #[arg(long, value_name = "PATH")]
    pub dump_ir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// ONNX protobuf or JSON mirror.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Datatype label `Dx-Wy`.
    #[arg(long, value_parser = parse_datatype)]
    pub datatype: Option<Datatype>,
    /// Directory with the four MNIST IDX files.
    #[arg(long, value_name = "DIR")]
    pub mnist: Option<PathBuf>,
    /// Calibration images taken from the start of the training set.
    #[arg(long, default_value_t = 256)]
    pub calib: usize,
    /// Previously quantized model (JSON), instead of --model/--datatype.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["model", "datatype"])]
    pub quantized: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the quantized model as JSON.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of test images to stream.
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    /// FIFO capacity of every channel, in tokens.
    #[arg(long, default_value_t = DEFAULT_FIFO_CAPACITY)]
    pub fifo: usize,
    /// Fire actors in a seeded random order instead of round robin.
    #[arg(long)]
    pub random_schedule: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Models to merge (repeatable).
    #[arg(long = "model", value_name = "PATH", required = true)]
    pub models: Vec<PathBuf>,
    /// Comma-separated datatypes; every model is quantized with each.
    #[arg(long, value_name = "LIST")]
    pub datatypes: String,
    #[arg(long, value_name = "DIR")]
    pub mnist: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub calib: usize,
    /// Write the configuration table as JSON.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Check every configuration against its source graph on this many test images.
    #[arg(long, default_value_t = 0)]
    pub check: usize,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Root directory of the emitted files.
    #[arg(long, value_name = "DIR")]
    pub outdir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FIFO_CAPACITY)]
    pub fifo: usize,
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    /// ONNX protobuf or JSON mirror.
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Comma-separated datatypes, e.g. D16-W16,D16-W8.
    #[arg(long, value_name = "LIST")]
    pub grid: String,
    #[arg(long, value_name = "DIR")]
    pub mnist: PathBuf,
    /// Report destination; stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// csv or markdown; defaults from the --out extension, else csv.
    #[arg(long)]
    pub format: Option<ReportFormat>,
    /// Test images sampled for evaluation.
    #[arg(long, default_value_t = 1000)]
    pub eval: usize,
    /// Evaluate on the full test set.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 256)]
    pub calib: usize,
    /// Seed of the evaluation subset sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write an accuracy vs weight bits chart (SVG).
    #[arg(long, value_name = "PATH")]
    pub plot: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FIFO_CAPACITY)]
    pub fifo: usize,
}

fn parse_datatype(s: &str) -> std::result::Result<Datatype, String> {
    s.parse::<Datatype>().map_err(|e| e.to_string())
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn load_mnist(dir: &Path) -> Result<Mnist> {
    Ok(Mnist::load(dir)?)
}

fn calibration(mnist: &Mnist, n: usize) -> Result<EvalSet> {
    if n == 0 {
        return Err(usage("--calib must be at least 1"));
    }
    Ok(EvalSet::head(&mnist.train, n))
}

fn quantize_for(ir: &ModelIR, d: Datatype, calib: &EvalSet) -> Result<QuantizedModel> {
    Ok(quantize_model(ir, &QuantConfig::new(d), &calib.images)?)
}

impl ModelArgs {
    /// The quantized model plus the MNIST data when a directory was given.
    fn resolve(&self) -> Result<(QuantizedModel, Option<Mnist>)> {
        let mnist = self.mnist.as_deref().map(load_mnist).transpose()?;
        if let Some(path) = &self.quantized {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let q = QuantizedModel::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            return Ok((q, mnist));
        }
        let model = self.model.as_ref().ok_or_else(|| usage("--model or --quantized is required"))?;
        let d = self.datatype.ok_or_else(|| usage("--datatype is required with --model"))?;
        let m = mnist
            .as_ref()
            .ok_or_else(|| usage("--mnist is required to calibrate activations"))?;
        let ir = load_model(model)?;
        let q = quantize_for(&ir, d, &calibration(m, self.calib)?)?;
        Ok((q, mnist))
    }
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn std::io::Write) -> Result<()> {
    match path {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn pretty(v: &Value) -> String {
    format!("{}\n", serde_json::to_string_pretty(v).expect("json value serializes"))
}

fn run_parse(a: &ParseArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ir = load_model(&a.model)?;
    if let Some(p) = &a.dump_ir {
        write_atomic(p, ir.to_json().as_bytes())?;
    }
    let layers: Vec<Value> = ir
        .layers
        .iter()
        .map(|l| json!({"name": l.name, "op": l.op, "input": l.input_shape, "output": l.output_shape}))
        .collect();
    let summary = json!({"model": ir.source_name, "input": ir.input_shape, "output": ir.output_shape, "layers": layers});
    write_output(None, &pretty(&summary), out)
}

fn run_quantize(a: &QuantizeArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let (q, _) = a.model.resolve()?;
    if let Some(p) = &a.out {
        write_atomic(p, q.to_json().as_bytes())?;
    }
    let formats: Vec<String> = q.edge_formats.iter().map(|f| format!("{}.{}", f.total_bits, f.frac_bits)).collect();
    let summary = json!({
        "datatype": q.config.datatype().to_string(),
        "zero_weight_fraction": q.zero_weight_fraction,
        "param_bits": q.param_bits,
        "edge_formats": formats,
    });
    write_output(None, &pretty(&summary), out)
}

fn run_simulate(a: &SimulateArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let (q, mnist) = a.model.resolve()?;
    let mnist = mnist.ok_or_else(|| usage("--mnist is required to pick test images"))?;
    if a.images == 0 {
        return Err(usage("--images must be at least 1"));
    }
    let eval = EvalSet::head(&mnist.test, a.images);
    let g = build_dataflow(&q, a.fifo)?;
    let inputs: Vec<Vec<i32>> = eval.images.iter().map(|i| q.quantize_input(i)).collect();
    let schedule = if a.random_schedule {
        Schedule::Random { seed: a.seed }
    } else {
        Schedule::RoundRobin
    };
    let r = Simulator::new(&g)?.run(&inputs, schedule)?;
    let correct = r
        .outputs
        .iter()
        .zip(&eval.labels)
        .filter(|(o, &l)| argmax(o) == usize::from(l))
        .count();
    let m = r.metrics();
    let summary = json!({
        "images": eval.len(),
        "correct": correct,
        "ticks": r.ticks,
        "latency_cycles": m.latency_cycles,
        "interval_cycles": m.interval_cycles,
        "mult_total": m.mult_total,
        "mult_zero_skippable": m.mult_zero_skippable,
        "predictions": r.outputs.iter().map(|o| argmax(o)).collect::<Vec<_>>(),
    });
    write_output(None, &pretty(&summary), out)
}

fn run_compose(a: &ComposeArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let datatypes = Datatype::parse_list(&a.datatypes)?;
    let mnist = load_mnist(&a.mnist)?;
    let calib = calibration(&mnist, a.calib)?;
    let mut graphs = Vec::new();
    let mut models = Vec::new();
    for path in &a.models {
        let ir = load_model(path)?;
        for &d in &datatypes {
            let q = quantize_for(&ir, d, &calib)?;
            let mut g = build_dataflow(&q, DEFAULT_FIFO_CAPACITY)?;
            g.name = format!("{}:{d}", path.display());
            graphs.push(g);
            models.push(q);
        }
    }
    let (md, table) = merge(&graphs)?;
    if let Some(p) = &a.out {
        write_atomic(p, table.to_json().as_bytes())?;
    }
    let eval = EvalSet::head(&mnist.test, a.check);
    let mut mismatches = 0usize;
    for (cfg, (g, q)) in graphs.iter().zip(&models).enumerate() {
        for img in &eval.images {
            let input = q.quantize_input(img);
            if execute_config(&md, &table, cfg, &input)? != crate::sim::run_image(g, &input)?.0 {
                mismatches += 1;
            }
        }
    }
    let summary = json!({
        "configs": table.configs.iter().map(|c| &c.source).collect::<Vec<_>>(),
        "actors_merged": md.actor_count(),
        "actors_separate": graphs.iter().map(|g| g.actors.len()).sum::<usize>(),
        "routing_actors": md.switches.len(),
        "sharing": md.sharing_report(),
        "checked_images": eval.len(),
        "mismatches": mismatches,
    });
    write_output(None, &pretty(&summary), out)?;
    if mismatches > 0 {
        return Err(Error::Explore(format!("{mismatches} configuration outputs differ from their source graphs")));
    }
    Ok(())
}

fn run_emit(a: &EmitArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let (q, _) = a.model.resolve()?;
    let g = build_dataflow(&q, a.fifo)?;
    let bundle = emit(&g, &q, Some(&a.outdir))?;
    let summary = json!({
        "outdir": a.outdir.display().to_string(),
        "sources": bundle.layer_sources.len(),
        "descriptors": bundle.actor_descriptors.len(),
        "param_bits": q.param_bits,
    });
    write_output(None, &pretty(&summary), out)
}

fn run_explore(a: &ExploreArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let datatypes = Datatype::parse_list(&a.grid)?;
    if !a.full && a.eval == 0 {
        return Err(usage("--eval must be at least 1"));
    }
    let format = a.format.unwrap_or_else(|| match a.out.as_ref().and_then(|p| p.extension()) {
        Some(e) if e == "md" => ReportFormat::Markdown,
        _ => ReportFormat::Csv,
    });
    let ir = load_model(&a.model)?;
    let mnist = load_mnist(&a.mnist)?;
    let calib = calibration(&mnist, a.calib)?;
    let n = if a.full { mnist.test.len() } else { a.eval };
    let eval = EvalSet::sample(&mnist.test, n, a.seed);
    let opts = ExploreOptions {
        fifo_capacity: a.fifo,
        seed: a.seed,
    };
    let report = explore(&ir, &datatypes, &calib, &eval, &opts)?;
    write_output(a.out.as_deref(), &render_report(&report, format), out)?;
    if let Some(p) = &a.plot {
        write_plot(&report, p)?;
    }
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match &cli.command {
        Command::Parse(a) => run_parse(a, out),
        Command::Quantize(a) => run_quantize(a, out),
        Command::Simulate(a) => run_simulate(a, out),
        Command::Compose(a) => run_compose(a, out),
        Command::Emit(a) => run_emit(a, out),
        Command::Explore(a) => run_explore(a, out),
    }
}

/// Splices flags from a `--config` JSON object into `argv` right after the
/// subcommand, skipping any flag already present. Booleans become bare flags
/// when true; arrays repeat the flag.
pub fn apply_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut args: Vec<String> = argv
        .into_iter()
        .map(|a| a.into_string().map_err(|a| usage(format!("argument is not UTF-8: {a:?}"))))
        .collect::<Result<_>>()?;
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args.into_iter().map(OsString::from).collect());
    };
    let path = if let Some(v) = args[pos].strip_prefix("--config=") {
        let v = v.to_string();
        args.remove(pos);
        v
    } else {
        if pos + 1 >= args.len() {
            return Err(usage("--config needs a file"));
        }
        args.remove(pos);
        args.remove(pos)
    };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    else {
        return Err(usage(format!("{}: expected a JSON object", path.display())));
    };
    let present = |flag: &str| args.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")));
    let mut extra = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if present(&flag) {
            continue;
        }
        let scalar = |v: &Value| match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            other => Err(usage(format!("config key '{key}': unsupported value {other}"))),
        };
        match &value {
            Value::Bool(true) => extra.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for v in items {
                    extra.push(flag.clone());
                    extra.push(scalar(v)?);
                }
            }
            v => {
                extra.push(flag);
                extra.push(scalar(v)?);
            }
        }
    }
    // after the subcommand, which is the first non-flag argument
    let at = args.iter().skip(1).position(|a| !a.starts_with('-')).map_or(args.len(), |i| i + 2);
    args.splice(at..at, extra);
    Ok(args.into_iter().map(OsString::from).collect())
}

/// Full entry point: parses `argv`, runs, reports errors. Returns the exit code.
pub fn main_with(argv: Vec<OsString>, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32 {
    let report = |err: &mut dyn std::io::Write, e: &Error| {
        let msg = e.to_string().replace('\n', " ");
        let _ = writeln!(err, "error[{}]: {msg}", e.code());
        e.exit_code()
    };
    let argv = match apply_config(argv) {
        Ok(a) => a,
        Err(e) => return report(err, &e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            // keep only clap's headline, minus its own "error: " prefix
            let text = e.render().to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            return report(err, &usage(line.trim_start_matches("error: ")));
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => report(err, &e),
    }
}

//! Python bindings: model loading, quantization, streaming simulation,
//! merging, emission and sweeps.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use onnx2hls::codegen;
use onnx2hls::compose::{self, ConfigTable, MultiDataflow};
use onnx2hls::error::{self, Error};
use onnx2hls::explore::{self as sweep, EvalSet, ExploreOptions, ReportFormat};
use onnx2hls::ir::{ModelIR, Shape};
use onnx2hls::mnist;
use onnx2hls::quant::{self, Datatype, QuantConfig};
use onnx2hls::sim::{self, DataflowGraph, Schedule, SimulationMetrics, Simulator};

create_exception!(onnx2hls, Onnx2HlsError, PyException);

fn py_err(e: impl Into<Error>) -> PyErr {
    let e = e.into();
    let msg = format!("error[{}]: {e}", e.code());
    if e.exit_code() == 1 {
        PyValueError::new_err(msg)
    } else {
        Onnx2HlsError::new_err(msg)
    }
}

fn shape_tuple(s: Shape) -> Vec<usize> {
    match s {
        Shape::Chw { c, h, w } => vec![c, h, w],
        Shape::Flat(n) => vec![n],
    }
}

fn datatype(s: &str) -> PyResult<Datatype> {
    s.parse::<Datatype>().map_err(py_err)
}

type Metrics = BTreeMap<&'static str, u64>;
type Topology = (Vec<(String, String)>, Vec<String>);

fn metrics_map(m: &SimulationMetrics) -> Metrics {
    BTreeMap::from([
        ("latency_cycles", m.latency_cycles),
        ("interval_cycles", m.interval_cycles),
        ("mult_total", m.mult_total),
        ("mult_zero_skippable", m.mult_zero_skippable),
    ])
}

/// Float layer IR of a CNN.
#[pyclass(name = "Model", module = "onnx2hls", frozen)]
struct PyModel {
    ir: ModelIR,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let ir = ModelIR::from_json(text).map_err(|e| py_err(Error::Format(e.to_string())))?;
        Ok(Self { ir })
    }

    fn to_json(&self) -> String {
        self.ir.to_json()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.ir.source_name
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        shape_tuple(self.ir.input_shape)
    }

    #[getter]
    fn output_shape(&self) -> Vec<usize> {
        shape_tuple(self.ir.output_shape)
    }

    /// `(name, kind, output shape)` per layer.
    #[getter]
    fn layers(&self) -> Vec<(String, String, Vec<usize>)> {
        self.ir
            .layers
            .iter()
            .map(|l| (l.name.clone(), format!("{:?}", l.kind()), shape_tuple(l.output_shape)))
            .collect()
    }

    fn float_inference(&self, image: Vec<f32>) -> PyResult<Vec<f32>> {
        check_len(self.ir.input_shape.len(), image.len())?;
        Ok(sim::float_inference(&self.ir, &image))
    }

    /// Quantizes with `datatype` (`Dx-Wy`), calibrating activations on `calib`.
    fn quantize(&self, datatype_label: &str, calib: Vec<Vec<f32>>) -> PyResult<PyQuantizedModel> {
        let cfg = QuantConfig::new(datatype(datatype_label)?);
        let q = quant::quantize_model(&self.ir, &cfg, &calib).map_err(py_err)?;
        Ok(PyQuantizedModel { q })
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, {} layers)", self.ir.source_name, self.ir.layers.len())
    }
}

fn check_len(expected: usize, actual: usize) -> PyResult<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(PyValueError::new_err(format!("expected {expected} values, got {actual}")))
    }
}

#[pyclass(name = "QuantizedModel", module = "onnx2hls", frozen)]
struct PyQuantizedModel {
    q: quant::QuantizedModel,
}

#[pymethods]
impl PyQuantizedModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let q = quant::QuantizedModel::from_json(text).map_err(|e| py_err(Error::Format(e.to_string())))?;
        Ok(Self { q })
    }

    fn to_json(&self) -> String {
        self.q.to_json()
    }

    #[getter]
    fn datatype(&self) -> String {
        self.q.config.datatype().to_string()
    }

    #[getter]
    fn param_bits(&self) -> u64 {
        self.q.param_bits
    }

    #[getter]
    fn zero_weight_fraction(&self) -> f64 {
        self.q.zero_weight_fraction
    }

    /// `(total_bits, frac_bits)` for the input and every layer output.
    #[getter]
    fn edge_formats(&self) -> Vec<(u32, u32)> {
        self.q.edge_formats.iter().map(|f| (f.total_bits, f.frac_bits)).collect()
    }

    fn quantize_input(&self, image: Vec<f32>) -> PyResult<Vec<i32>> {
        check_len(self.q.ir.input_shape.len(), image.len())?;
        Ok(self.q.quantize_input(&image))
    }

    /// Direct integer inference, the oracle for the streaming simulator.
    fn reference(&self, codes: Vec<i32>) -> PyResult<Vec<i32>> {
        check_len(self.q.ir.input_shape.len(), codes.len())?;
        Ok(sim::reference_inference(&self.q, &codes))
    }

    #[pyo3(signature = (fifo_capacity = sim::DEFAULT_FIFO_CAPACITY))]
    fn dataflow(&self, fifo_capacity: usize) -> PyResult<PyGraph> {
        let g = sim::build_dataflow(&self.q, fifo_capacity).map_err(py_err)?;
        Ok(PyGraph { g })
    }
}

#[pyclass(name = "Graph", module = "onnx2hls", frozen)]
struct PyGraph {
    g: DataflowGraph,
}

#[pymethods]
impl PyGraph {
    #[getter]
    fn name(&self) -> &str {
        &self.g.name
    }

    /// `(name, class)` per actor.
    #[getter]
    fn actors(&self) -> Vec<(String, String)> {
        self.g.actors.iter().map(|a| (a.name.clone(), a.kind.class().to_string())).collect()
    }

    #[getter]
    fn connections(&self) -> Vec<String> {
        self.g.channels.iter().map(|c| self.g.connection(c).to_string()).collect()
    }

    #[getter]
    fn parameter_bits(&self) -> u64 {
        self.g.parameter_bits()
    }

    /// Streams one image (twice, to measure the interval); returns
    /// `(output codes, metrics)`.
    fn run_image(&self, codes: Vec<i32>) -> PyResult<(Vec<i32>, Metrics)> {
        let (out, m) = sim::run_image(&self.g, &codes).map_err(py_err)?;
        Ok((out, metrics_map(&m)))
    }

    /// Streams a batch; `seed` switches to a randomized firing order.
    #[pyo3(signature = (images, seed = None))]
    fn run(&self, images: Vec<Vec<i32>>, seed: Option<u64>) -> PyResult<(Vec<Vec<i32>>, Metrics)> {
        let schedule = seed.map_or(Schedule::RoundRobin, |seed| Schedule::Random { seed });
        let r = Simulator::new(&self.g)
            .and_then(|s| s.run(&images, schedule))
            .map_err(py_err)?;
        let m = r.metrics();
        Ok((r.outputs, metrics_map(&m)))
    }

    fn topology_xdf(&self) -> String {
        codegen::write_topology(&self.g.skeleton())
    }

    /// Generates the HLS bundle; writes it when `outdir` is given. Returns
    /// every file keyed by relative path.
    #[pyo3(signature = (model, outdir = None))]
    fn emit(&self, model: &PyQuantizedModel, outdir: Option<PathBuf>) -> PyResult<BTreeMap<String, String>> {
        let b = codegen::emit(&self.g, &model.q, outdir.as_deref()).map_err(py_err)?;
        Ok(b.files().into_iter().map(|(k, v)| (k, v.to_string())).collect())
    }

    fn __repr__(&self) -> String {
        format!("Graph({:?}, {} actors, {} channels)", self.g.name, self.g.actors.len(), self.g.channels.len())
    }
}

#[pyclass(name = "MultiDataflow", module = "onnx2hls", frozen)]
struct PyMultiDataflow {
    md: MultiDataflow,
    table: ConfigTable,
}

#[pymethods]
impl PyMultiDataflow {
    #[getter]
    fn actor_count(&self) -> usize {
        self.md.actor_count()
    }

    #[getter]
    fn config_count(&self) -> usize {
        self.md.config_count
    }

    #[getter]
    fn routing_actors(&self) -> Vec<String> {
        self.md.switches.iter().map(|r| r.name.clone()).collect()
    }

    fn config_table_json(&self) -> String {
        self.table.to_json()
    }

    fn execute(&self, config: usize, codes: Vec<i32>) -> PyResult<Vec<i32>> {
        compose::execute_config(&self.md, &self.table, config, &codes).map_err(py_err)
    }
}

/// Merges graphs into one multi-dataflow, one configuration per graph.
#[pyfunction]
fn merge(graphs: Vec<PyRef<'_, PyGraph>>) -> PyResult<PyMultiDataflow> {
    let gs: Vec<DataflowGraph> = graphs.iter().map(|g| g.g.clone()).collect();
    let (md, table) = compose::merge(&gs).map_err(py_err)?;
    Ok(PyMultiDataflow { md, table })
}

#[pyfunction]
fn load_model(path: PathBuf) -> PyResult<PyModel> {
    Ok(PyModel {
        ir: error::load_model(&path).map_err(py_err)?,
    })
}

/// Actors `(name, class)` and connection strings of an XDF topology.
#[pyfunction]
fn parse_topology(xdf: &str) -> PyResult<Topology> {
    let g = codegen::parse_topology(xdf).map_err(py_err)?;
    Ok((
        g.actors.into_iter().map(|a| (a.name, a.class)).collect(),
        g.connections.iter().map(ToString::to_string).collect(),
    ))
}

/// `(act_bits, weight_bits)` of a `Dx-Wy` label.
#[pyfunction]
fn parse_datatype(label: &str) -> PyResult<(u32, u32)> {
    let d = datatype(label)?;
    Ok((d.act_bits, d.weight_bits))
}

#[pyclass(name = "Mnist", module = "onnx2hls", frozen)]
struct PyMnist {
    m: mnist::Mnist,
}

#[pymethods]
impl PyMnist {
    #[new]
    fn new(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            m: mnist::Mnist::load(&dir).map_err(py_err)?,
        })
    }

    #[getter]
    fn train_count(&self) -> usize {
        self.m.train.len()
    }

    #[getter]
    fn test_count(&self) -> usize {
        self.m.test.len()
    }

    /// Pixels in `[0, 1]` and the label of test image `i`.
    fn test_item(&self, i: usize) -> PyResult<(Vec<f32>, u8)> {
        item(&self.m.test, i)
    }

    fn train_item(&self, i: usize) -> PyResult<(Vec<f32>, u8)> {
        item(&self.m.train, i)
    }
}

fn item(set: &mnist::LabeledSet, i: usize) -> PyResult<(Vec<f32>, u8)> {
    if i >= set.len() {
        return Err(pyo3::exceptions::PyIndexError::new_err(format!("index {i} out of range")));
    }
    Ok((set.images.normalized(i), set.labels[i]))
}

/// Runs a datatype sweep and returns the rendered report.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (model, grid, mnist_dir, eval = 1000, calib = 256, seed = 0, format = "csv"))]
fn explore(
    py: Python<'_>,
    model: &PyModel,
    grid: &str,
    mnist_dir: PathBuf,
    eval: usize,
    calib: usize,
    seed: u64,
    format: &str,
) -> PyResult<String> {
    let format: ReportFormat = format.parse().map_err(PyValueError::new_err)?;
    let datatypes = Datatype::parse_list(grid).map_err(py_err)?;
    let data = mnist::Mnist::load(&mnist_dir).map_err(py_err)?;
    let ir = &model.ir;
    let report = py
        .detach(|| {
            let calib = EvalSet::head(&data.train, calib);
            let eval = EvalSet::sample(&data.test, eval, seed);
            let opts = ExploreOptions {
                seed,
                ..ExploreOptions::default()
            };
            sweep::explore(ir, &datatypes, &calib, &eval, &opts)
        })
        .map_err(py_err)?;
    Ok(sweep::render_report(&report, format))
}

#[pymodule]
#[pyo3(name = "onnx2hls")]
fn onnx2hls_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Onnx2HlsError", m.py().get_type::<Onnx2HlsError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyQuantizedModel>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyMultiDataflow>()?;
    m.add_class::<PyMnist>()?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(parse_topology, m)?)?;
    m.add_function(wrap_pyfunction!(parse_datatype, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(explore, m)?)?;
    Ok(())
}

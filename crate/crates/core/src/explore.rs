//! Datatype sweeps: one report row per `Dx-Wy` configuration.

use std::fmt::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::ModelIR;
use crate::mnist::LabeledSet;
use crate::quant::{quantize_model, Datatype, QuantConfig};
use crate::sim::{argmax, build_dataflow, float_inference, run_image, run_stream, DEFAULT_FIFO_CAPACITY};

/// Block RAM size used for the footprint estimate (one 36 Kb block).
pub const BRAM36_BITS: u64 = 36_864;

pub const CSV_HEADER: &str =
    "datatype,zero_weights_pct,param_bits,bram36,latency_cycles,interval_cycles,accuracy_pct,zero_mults_pct";

/// Images per streaming run when measuring accuracy.
const STREAM_CHUNK: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationRow {
    pub datatype: String,
    pub zero_weight_pct: f64,
    pub param_bits: u64,
    pub bram36: u64,
    pub latency_cycles: u64,
    pub interval_cycles: u64,
    pub accuracy_pct: f64,
    pub zero_mults_pct: f64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl ExplorationRow {
    /// The row as it reads back from a rendered table.
    pub fn rounded(&self) -> Self {
        Self {
            zero_weight_pct: round2(self.zero_weight_pct),
            accuracy_pct: round2(self.accuracy_pct),
            zero_mults_pct: round2(self.zero_mults_pct),
            ..self.clone()
        }
    }

    fn cells(&self) -> [String; 8] {
        [
            self.datatype.clone(),
            format!("{:.2}", self.zero_weight_pct),
            self.param_bits.to_string(),
            self.bram36.to_string(),
            self.latency_cycles.to_string(),
            self.interval_cycles.to_string(),
            format!("{:.2}", self.accuracy_pct),
            format!("{:.2}", self.zero_mults_pct),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model: String,
    pub eval_size: usize,
    pub calib_size: usize,
    pub seed: u64,
    pub float_accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationReport {
    pub rows: Vec<ExplorationRow>,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown report format '{other}' (csv or markdown)")),
        }
    }
}

/// Labeled float images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSet {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_indices(set: &LabeledSet, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| set.images.normalized(i)).collect(),
            labels: indices.iter().map(|&i| set.labels[i]).collect(),
        }
    }

    /// `n` distinct images drawn with a seeded ChaCha8 stream, in index order.
    /// `n >= len` takes the whole set.
    pub fn sample(set: &LabeledSet, n: usize, seed: u64) -> Self {
        let mut indices: Vec<usize> = if n >= set.len() {
            (0..set.len()).collect()
        } else {
            sample(&mut ChaCha8Rng::seed_from_u64(seed), set.len(), n).into_vec()
        };
        indices.sort_unstable();
        Self::from_indices(set, &indices)
    }

    /// The first `n` images, used as the calibration batch.
    pub fn head(set: &LabeledSet, n: usize) -> Self {
        Self::from_indices(set, &(0..n.min(set.len())).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreOptions {
    pub fifo_capacity: usize,
    pub seed: u64,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        Self {
            fifo_capacity: DEFAULT_FIFO_CAPACITY,
            seed: 0,
        }
    }
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Top-1 accuracy of the float model, in percent.
pub fn float_accuracy(ir: &ModelIR, eval: &EvalSet) -> f64 {
    let correct = eval
        .images
        .par_iter()
        .zip(&eval.labels)
        .filter(|(img, &l)| argmax(&float_inference(ir, img)) == usize::from(l))
        .count();
    pct(correct as u64, eval.len() as u64)
}

fn explore_point(ir: &ModelIR, d: Datatype, calib: &EvalSet, eval: &EvalSet, opts: &ExploreOptions) -> Result<ExplorationRow> {
    let context = |e: Error| Error::Explore(format!("{d}: {e}"));
    let q = quantize_model(ir, &QuantConfig::new(d), &calib.images).map_err(|e| context(e.into()))?;
    let g = build_dataflow(&q, opts.fifo_capacity).map_err(|e| context(e.into()))?;
    let inputs: Vec<Vec<i32>> = eval.images.iter().map(|img| q.quantize_input(img)).collect();
    let (_, metrics) = run_image(&g, &inputs[0]).map_err(|e| context(e.into()))?;
    let outputs: Vec<Vec<Vec<i32>>> = inputs
        .par_chunks(STREAM_CHUNK)
        .map(|chunk| run_stream(&g, chunk).map(|r| r.outputs))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| context(e.into()))?;
    let correct = outputs
        .iter()
        .flatten()
        .zip(&eval.labels)
        .filter(|(out, &l)| argmax(out) == usize::from(l))
        .count();
    Ok(ExplorationRow {
        datatype: d.to_string(),
        zero_weight_pct: 100.0 * q.zero_weight_fraction,
        param_bits: q.param_bits,
        bram36: q.param_bits.div_ceil(BRAM36_BITS),
        latency_cycles: metrics.latency_cycles,
        interval_cycles: metrics.interval_cycles,
        accuracy_pct: pct(correct as u64, eval.len() as u64),
        zero_mults_pct: pct(metrics.mult_zero_skippable, metrics.mult_total),
    })
}

/// Sweeps `datatypes` over `ir`: quantize on `calib`, build the streaming
/// graph, stream every `eval` image through it. Rows follow request order; the
/// first failing point aborts the sweep.
pub fn explore(
    ir: &ModelIR,
    datatypes: &[Datatype],
    calib: &EvalSet,
    eval: &EvalSet,
    opts: &ExploreOptions,
) -> Result<ExplorationReport> {
    if eval.is_empty() {
        return Err(Error::Explore("evaluation set is empty".into()));
    }
    let rows = datatypes
        .par_iter()
        .map(|&d| explore_point(ir, d, calib, eval, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExplorationReport {
        rows,
        metadata: ReportMetadata {
            model: ir.source_name.clone(),
            eval_size: eval.len(),
            calib_size: calib.len(),
            seed: opts.seed,
            float_accuracy_pct: float_accuracy(ir, eval),
        },
    })
}

pub fn render_report(report: &ExplorationReport, format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str(CSV_HEADER);
            s.push('\n');
            for r in &report.rows {
                s.push_str(&r.cells().join(","));
                s.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let header: Vec<&str> = CSV_HEADER.split(',').collect();
            let _ = writeln!(s, "| {} |", header.join(" | "));
            let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
            for r in &report.rows {
                let _ = writeln!(s, "| {} |", r.cells().join(" | "));
            }
        }
    }
    s
}

/// Reads rows back from CSV or markdown produced by [`render_report`].
pub fn parse_report_table(text: &str) -> Result<Vec<ExplorationRow>> {
    let bad = |line: &str, why: &str| Error::Format(format!("report line '{line}': {why}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let split = |line: &str| -> Vec<String> {
        let t = line.trim();
        if t.starts_with('|') {
            t.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect()
        } else {
            t.split(',').map(|c| c.trim().to_string()).collect()
        }
    };
    let header = lines.next().ok_or_else(|| Error::Format("empty report".into()))?;
    if split(header).join(",") != CSV_HEADER {
        return Err(bad(header, "unexpected header"));
    }
    let mut rows = Vec::new();
    for line in lines {
        let cells = split(line);
        if cells.iter().all(|c| c.chars().all(|ch| ch == '-' || ch == ':')) {
            continue;
        }
        if cells.len() != 8 {
            return Err(bad(line, "expected 8 columns"));
        }
        let f = |i: usize| cells[i].parse::<f64>().map_err(|_| bad(line, "not a number"));
        let u = |i: usize| cells[i].parse::<u64>().map_err(|_| bad(line, "not an integer"));
        rows.push(ExplorationRow {
            datatype: cells[0].clone(),
            zero_weight_pct: f(1)?,
            param_bits: u(2)?,
            bram36: u(3)?,
            latency_cycles: u(4)?,
            interval_cycles: u(5)?,
            accuracy_pct: f(6)?,
            zero_mults_pct: f(7)?,
        });
    }
    Ok(rows)
}

/// Accuracy against weight bits, one series per activation width, as SVG.
pub fn render_plot(report: &ExplorationReport) -> Result<String> {
    use plotters::prelude::*;

    let err = |e: &dyn std::fmt::Display| Error::Explore(format!("plot: {e}"));
    let mut series: std::collections::BTreeMap<u32, Vec<(u32, f64)>> = Default::default();
    for r in &report.rows {
        let d: Datatype = r.datatype.parse()?;
        series.entry(d.act_bits).or_default().push((d.weight_bits, r.accuracy_pct));
    }
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{}: accuracy vs weight bits", report.metadata.model), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(44)
            .build_cartesian_2d((1u32..40u32).log_scale(), 0f64..100f64)
            .map_err(|e| err(&e))?;
        chart
            .configure_mesh()
            .x_desc("weight bits")
            .y_desc("accuracy %")
            .x_label_formatter(&|x| x.to_string())
            .draw()
            .map_err(|e| err(&e))?;
        for (i, (act, mut pts)) in series.into_iter().enumerate() {
            pts.sort_by_key(|p| p.0);
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| err(&e))?
                .label(format!("D{act}"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(|e| err(&e))?;
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(&e))?;
        root.present().map_err(|e| err(&e))?;
    }
    Ok(svg)
}

pub fn write_plot(report: &ExplorationReport, path: &Path) -> Result<()> {
    crate::codegen::write_atomic(path, render_plot(report)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(d: &str) -> ExplorationRow {
        ExplorationRow {
            datatype: d.into(),
            zero_weight_pct: 15.004,
            param_bits: 73_728,
            bram36: 2,
            latency_cycles: 1200,
            interval_cycles: 800,
            accuracy_pct: 97.3333,
            zero_mults_pct: 14.996,
        }
    }

    fn report(rows: Vec<ExplorationRow>) -> ExplorationReport {
        ExplorationReport {
            rows,
            metadata: ReportMetadata {
                model: "m".into(),
                eval_size: 3,
                calib_size: 1,
                seed: 0,
                float_accuracy_pct: 100.0,
            },
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(render_report(&report(vec![]), ReportFormat::Csv), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn one_row_csv_has_two_lines() {
        let text = render_report(&report(vec![row("D16-W8")]), ReportFormat::Csv);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().nth(1).unwrap(), "D16-W8,15.00,73728,2,1200,800,97.33,15.00");
    }

    #[test]
    fn both_formats_read_back() {
        let r = report(vec![row("D16-W8"), row("D8-W2")]);
        let expect: Vec<_> = r.rows.iter().map(ExplorationRow::rounded).collect();
        for f in [ReportFormat::Csv, ReportFormat::Markdown] {
            assert_eq!(parse_report_table(&render_report(&r, f)).unwrap(), expect);
        }
    }

    #[test]
    fn plot_is_svg() {
        let svg = render_plot(&report(vec![row("D16-W8"), row("D16-W4")])).unwrap();
        assert!(svg.starts_with("<svg"));
    }
}

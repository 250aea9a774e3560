//! Dx-Wy post-training fixed-point quantization.
//!
//! Every tensor gets its own signed [`FixedPointFormat`]: the total width comes
//! from the datatype (`x` bits for activations, `y` bits for parameters) and
//! the integer/fraction split from the tensor's max-abs value. Values are
//! rounded half-to-even and saturated to the code range.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{LayerKind, ModelIR};
use crate::sim::reference::float_activations;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("cannot calibrate an empty tensor")]
    EmptyTensor,
    #[error("tensor contains a non-finite value")]
    NonFiniteValue,
    #[error("cannot quantize NaN")]
    NanInput,
    #[error("invalid fixed-point format: {total_bits} total bits, {frac_bits} fraction bits")]
    InvalidFormat { total_bits: u32, frac_bits: u32 },
    #[error("malformed datatype '{0}' (expected Dx-Wy with x, y in {{2, 4, 8, 16, 32}})")]
    MalformedDatatype(String),
    #[error("calibration batch is empty")]
    EmptyCalibration,
    #[error("calibration image has {actual} values, model expects {expected}")]
    ImageSize { expected: usize, actual: usize },
}

/// Signed two's-complement fixed-point format; value = code * 2^-frac_bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub frac_bits: u32,
}

impl FixedPointFormat {
    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, QuantError> {
        if !(2..=32).contains(&total_bits) || frac_bits >= total_bits {
            return Err(QuantError::InvalidFormat { total_bits, frac_bits });
        }
        Ok(Self { total_bits, frac_bits })
    }

    /// Integer bits excluding the sign bit.
    pub fn int_bits(&self) -> u32 {
        self.total_bits - 1 - self.frac_bits
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.step()
    }

    pub fn min_value(&self) -> f64 {
        self.min_code() as f64 * self.step()
    }

    pub fn contains(&self, code: i64) -> bool {
        (self.min_code()..=self.max_code()).contains(&code)
    }

    pub fn dequantize(&self, code: i32) -> f64 {
        f64::from(code) * self.step()
    }

    pub fn quantize(&self, x: f64) -> Result<i32, QuantError> {
        quantize_value(x, *self)
    }

    fn saturate(&self, scaled: f64) -> i32 {
        scaled.clamp(self.min_code() as f64, self.max_code() as f64) as i32
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.int_bits(), self.frac_bits)
    }
}

/// `clamp(round_half_even(x * 2^frac), min_code, max_code)`.
pub fn quantize_value(x: f64, fmt: FixedPointFormat) -> Result<i32, QuantError> {
    if x.is_nan() {
        return Err(QuantError::NanInput);
    }
    let scaled = (x * f64::from(fmt.frac_bits).exp2()).round_ties_even();
    Ok(fmt.saturate(scaled))
}

/// Max-abs calibration: the widest fraction that still represents every value
/// without saturation, or `frac_bits = 0` when the width cannot cover the range.
pub fn calibrate_format(values: &[f32], total_bits: u32) -> Result<FixedPointFormat, QuantError> {
    if values.is_empty() {
        return Err(QuantError::EmptyTensor);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFiniteValue);
    }
    let max = values.iter().copied().fold(f32::MIN, f32::max);
    let min = values.iter().copied().fold(f32::MAX, f32::min);
    calibrate_range(f64::from(min), f64::from(max), total_bits)
}

/// Calibration from an observed `[min, max]` range.
pub fn calibrate_range(min: f64, max: f64, total_bits: u32) -> Result<FixedPointFormat, QuantError> {
    FixedPointFormat::new(total_bits, 0)?;
    for int_bits in 0..total_bits {
        let fmt = FixedPointFormat::new(total_bits, total_bits - 1 - int_bits)?;
        let scale = f64::from(fmt.frac_bits).exp2();
        let hi = (max.max(0.0) * scale).round_ties_even();
        let lo = (min.min(0.0) * scale).round_ties_even();
        if hi <= fmt.max_code() as f64 && lo >= fmt.min_code() as f64 {
            return Ok(fmt);
        }
    }
    FixedPointFormat::new(total_bits, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub format: FixedPointFormat,
    pub codes: Vec<i32>,
}

impl QuantizedTensor {
    pub fn quantize(shape: Vec<usize>, values: &[f32], format: FixedPointFormat) -> Result<Self, QuantError> {
        let codes = values
            .iter()
            .map(|&v| quantize_value(f64::from(v), format))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { shape, format, codes })
    }

    /// Calibrates a format for `values` and quantizes them with it.
    pub fn calibrated(shape: Vec<usize>, values: &[f32], total_bits: u32) -> Result<Self, QuantError> {
        let format = calibrate_format(values, total_bits)?;
        Self::quantize(shape, values, format)
    }

    pub fn dequantized(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.format.dequantize(c)).collect()
    }

    pub fn zero_count(&self) -> usize {
        self.codes.iter().filter(|&&c| c == 0).count()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

pub const SUPPORTED_WIDTHS: [u32; 5] = [2, 4, 8, 16, 32];

/// A `Dx-Wy` datatype: `x` activation bits, `y` parameter bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Datatype {
    pub act_bits: u32,
    pub weight_bits: u32,
}

impl Datatype {
    pub fn new(act_bits: u32, weight_bits: u32) -> Result<Self, QuantError> {
        if SUPPORTED_WIDTHS.contains(&act_bits) && SUPPORTED_WIDTHS.contains(&weight_bits) {
            Ok(Self { act_bits, weight_bits })
        } else {
            Err(QuantError::MalformedDatatype(format!("D{act_bits}-W{weight_bits}")))
        }
    }

    pub fn parse_list(text: &str) -> Result<Vec<Self>, QuantError> {
        text.split(',').map(|s| s.trim().parse()).collect()
    }
}

impl fmt::Display for Datatype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}-W{}", self.act_bits, self.weight_bits)
    }
}

impl FromStr for Datatype {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        static PATTERN: OnceLock<Regex> = OnceLock::new();
        let re = PATTERN.get_or_init(|| Regex::new(r"^D(\d+)-W(\d+)$").unwrap());
        let bad = || QuantError::MalformedDatatype(s.to_string());
        let caps = re.captures(s).ok_or_else(bad)?;
        let act = caps[1].parse().map_err(|_| bad())?;
        let weight = caps[2].parse().map_err(|_| bad())?;
        Datatype::new(act, weight).map_err(|_| bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rounding {
    HalfEven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Overflow {
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub act_bits: u32,
    pub weight_bits: u32,
    pub calibration_images: usize,
    pub rounding: Rounding,
    pub saturation: Overflow,
}

impl QuantConfig {
    pub const DEFAULT_CALIBRATION_IMAGES: usize = 256;

    pub fn new(datatype: Datatype) -> Self {
        Self {
            act_bits: datatype.act_bits,
            weight_bits: datatype.weight_bits,
            calibration_images: Self::DEFAULT_CALIBRATION_IMAGES,
            rounding: Rounding::HalfEven,
            saturation: Overflow::Saturate,
        }
    }

    pub fn datatype(&self) -> Datatype {
        Datatype {
            act_bits: self.act_bits,
            weight_bits: self.weight_bits,
        }
    }
}

/// Quantized parameters of one layer; absent for parameter-free layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantizedLayer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<QuantizedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<QuantizedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<QuantizedTensor>,
}

impl QuantizedLayer {
    pub fn parameters(&self) -> impl Iterator<Item = &QuantizedTensor> {
        [&self.weights, &self.bias, &self.scale].into_iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub ir: ModelIR,
    pub config: QuantConfig,
    pub layers: Vec<QuantizedLayer>,
    /// `edge_formats[0]` is the model input; `edge_formats[i + 1]` the output of layer `i`.
    pub edge_formats: Vec<FixedPointFormat>,
    pub zero_weight_fraction: f64,
    pub param_bits: u64,
}

impl QuantizedModel {
    /// Assembles a model from already-quantized parts and fills in the summary fields.
    pub fn from_parts(
        ir: ModelIR,
        config: QuantConfig,
        layers: Vec<QuantizedLayer>,
        edge_formats: Vec<FixedPointFormat>,
    ) -> Self {
        let mut model = Self {
            ir,
            config,
            layers,
            edge_formats,
            zero_weight_fraction: 0.0,
            param_bits: 0,
        };
        model.zero_weight_fraction = zero_weight_fraction(&model);
        model.param_bits = model
            .layers
            .iter()
            .flat_map(QuantizedLayer::parameters)
            .map(|t| t.len() as u64 * u64::from(t.format.total_bits))
            .sum();
        model
    }

    pub fn input_format(&self) -> FixedPointFormat {
        self.edge_formats[0]
    }

    pub fn output_format(&self) -> FixedPointFormat {
        *self.edge_formats.last().unwrap()
    }

    /// Quantizes a float image (CHW order) with the input edge format.
    pub fn quantize_input(&self, image: &[f32]) -> Vec<i32> {
        let fmt = self.input_format();
        image
            .iter()
            .map(|&v| quantize_value(f64::from(v), fmt).unwrap_or(0))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("quantized model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Fraction of weight codes equal to zero; biases and scales are excluded.
pub fn zero_weight_fraction(model: &QuantizedModel) -> f64 {
    let (zeros, total) = model
        .layers
        .iter()
        .filter_map(|l| l.weights.as_ref())
        .fold((0usize, 0usize), |(z, t), w| (z + w.zero_count(), t + w.len()));
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

/// Post-training quantization of every parameter tensor and activation edge.
///
/// Parameter-free layers (ReLU, max pooling, flatten) pass their input format
/// through unchanged; every other edge is calibrated from the min/max of the
/// float model's activations over `calib`.
pub fn quantize_model(ir: &ModelIR, cfg: &QuantConfig, calib: &[Vec<f32>]) -> Result<QuantizedModel, QuantError> {
    if calib.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let expected = ir.input_shape.len();
    if let Some(bad) = calib.iter().find(|img| img.len() != expected) {
        return Err(QuantError::ImageSize {
            expected,
            actual: bad.len(),
        });
    }
    let wb = cfg.weight_bits;

    let layers = ir
        .layers
        .par_iter()
        .map(|layer| -> Result<QuantizedLayer, QuantError> {
            let weights = layer
                .weights
                .as_ref()
                .map(|w| QuantizedTensor::calibrated(w.shape.clone(), &w.data, wb))
                .transpose()?;
            let bias = layer
                .bias
                .as_ref()
                .map(|b| QuantizedTensor::calibrated(vec![b.len()], b, wb))
                .transpose()?;
            let scale = layer
                .scale
                .as_ref()
                .map(|s| QuantizedTensor::calibrated(vec![s.len()], s, wb))
                .transpose()?;
            Ok(QuantizedLayer { weights, bias, scale })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let ranges = activation_ranges(ir, calib);
    let mut edge_formats = Vec::with_capacity(ir.layers.len() + 1);
    let (lo, hi) = ranges[0];
    edge_formats.push(calibrate_range(lo, hi, cfg.act_bits)?);
    for (i, layer) in ir.layers.iter().enumerate() {
        let fmt = match layer.kind() {
            LayerKind::Relu | LayerKind::MaxPool | LayerKind::Flatten => edge_formats[i],
            LayerKind::Conv | LayerKind::ScaleShift | LayerKind::FullyConnected => {
                let (lo, hi) = ranges[i + 1];
                calibrate_range(lo, hi, cfg.act_bits)?
            }
        };
        edge_formats.push(fmt);
    }

    Ok(QuantizedModel::from_parts(ir.clone(), *cfg, layers, edge_formats))
}

/// Per-edge `(min, max)` over the calibration batch; min/max are order-insensitive.
fn activation_ranges(ir: &ModelIR, calib: &[Vec<f32>]) -> Vec<(f64, f64)> {
    let edges = ir.layers.len() + 1;
    let empty = || vec![(f64::INFINITY, f64::NEG_INFINITY); edges];
    let merge = |mut a: Vec<(f64, f64)>, b: Vec<(f64, f64)>| {
        for (x, y) in a.iter_mut().zip(b) {
            x.0 = x.0.min(y.0);
            x.1 = x.1.max(y.1);
        }
        a
    };
    calib
        .par_iter()
        .map(|img| {
            float_activations(ir, img)
                .iter()
                .map(|act| {
                    act.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(f64::from(v)), hi.max(f64::from(v)))
                    })
                })
                .collect::<Vec<_>>()
        })
        .reduce(empty, merge)
        .into_iter()
        .map(|(lo, hi)| if lo > hi { (0.0, 0.0) } else { (lo, hi) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{LayerNode, Shape, Tensor};
    use proptest::prelude::*;

    fn fmt(total: u32, frac: u32) -> FixedPointFormat {
        FixedPointFormat::new(total, frac).unwrap()
    }

    #[test]
    fn calibration_examples() {
        let f = calibrate_format(&[-0.9, 0.3, 0.9], 8).unwrap();
        assert_eq!((f.int_bits(), f.frac_bits), (0, 7));
        assert_eq!(f.max_value(), 0.9921875);

        let f = calibrate_format(&[3.2, -1.0], 8).unwrap();
        assert_eq!((f.int_bits(), f.frac_bits), (2, 5));
        assert_eq!(f.max_value(), 4.0 - 1.0 / 32.0);

        assert_eq!(calibrate_format(&[], 8), Err(QuantError::EmptyTensor));
        assert_eq!(calibrate_format(&[f32::INFINITY], 8), Err(QuantError::NonFiniteValue));
    }

    #[test]
    fn calibration_avoids_rounding_into_saturation() {
        // 3.99 * 32 rounds to 128, which does not fit 8 bits with 2 integer bits
        let f = calibrate_format(&[3.99], 8).unwrap();
        assert_eq!(f.int_bits(), 3);
        // exactly -4 fits thanks to the extra negative code
        let f = calibrate_format(&[-4.0], 8).unwrap();
        assert_eq!(f.int_bits(), 2);
    }

    #[test]
    fn quantize_value_examples() {
        assert_eq!(quantize_value(0.5, fmt(8, 6)), Ok(32));
        assert_eq!(fmt(8, 6).dequantize(32), 0.5);
        let f = fmt(4, 2);
        assert_eq!(quantize_value(1.9, f), Ok(7));
        assert_eq!(f.dequantize(7), 1.75);
        for total in [2, 4, 8, 16, 32] {
            assert_eq!(quantize_value(0.0, fmt(total, total - 1)), Ok(0));
        }
        assert_eq!(quantize_value(f64::NAN, f), Err(QuantError::NanInput));
        assert_eq!(quantize_value(f64::INFINITY, f), Ok(7));
        assert_eq!(quantize_value(f64::NEG_INFINITY, f), Ok(-8));
        // ties go to even
        assert_eq!(quantize_value(0.375, fmt(8, 2)), Ok(2));
        assert_eq!(quantize_value(0.625, fmt(8, 2)), Ok(2));
    }

    #[test]
    fn invalid_formats_are_rejected() {
        assert!(FixedPointFormat::new(1, 0).is_err());
        assert!(FixedPointFormat::new(33, 0).is_err());
        assert!(FixedPointFormat::new(8, 8).is_err());
    }

    #[test]
    fn datatype_parsing() {
        let d: Datatype = "D16-W8".parse().unwrap();
        assert_eq!(d, Datatype { act_bits: 16, weight_bits: 8 });
        assert_eq!(d.to_string(), "D16-W8");
        assert!(matches!("D7-X2".parse::<Datatype>(), Err(QuantError::MalformedDatatype(s)) if s == "D7-X2"));
        assert!("D7-W2".parse::<Datatype>().is_err());
        assert!("D16-W8 ".parse::<Datatype>().is_err());
        assert_eq!(Datatype::parse_list("D32-W32, D16-W2").unwrap().len(), 2);
    }

    fn one_fc(weights: Vec<f32>) -> ModelIR {
        let n = weights.len();
        ModelIR::new(
            "fc",
            Shape::Flat(n),
            vec![LayerNode::fully_connected("fc0", Tensor::new(vec![1, n], weights), vec![0.0])],
        )
        .unwrap()
    }

    #[test]
    fn four_bit_weight_example() {
        let ir = one_fc(vec![0.3, -0.02, 0.01, 0.7]);
        let cfg = QuantConfig::new(Datatype::new(16, 4).unwrap());
        let q = quantize_model(&ir, &cfg, &[vec![1.0; 4]]).unwrap();
        let w = q.layers[0].weights.as_ref().unwrap();
        assert_eq!((w.format.int_bits(), w.format.frac_bits), (0, 3));
        assert_eq!(w.codes, vec![2, 0, 0, 6]);
        assert_eq!(q.zero_weight_fraction, 0.5);
        // 4 weights + 1 bias at 4 bits
        assert_eq!(q.param_bits, 20);
    }

    #[test]
    fn zero_fraction_edge_cases() {
        let ir = one_fc(vec![0.0; 4]);
        let cfg = QuantConfig::new(Datatype::new(8, 8).unwrap());
        let q = quantize_model(&ir, &cfg, &[vec![0.5; 4]]).unwrap();
        assert_eq!(q.zero_weight_fraction, 1.0);

        let passthrough = ModelIR::new("p", Shape::Flat(4), vec![]).unwrap();
        let q = quantize_model(&passthrough, &cfg, &[vec![0.5; 4]]).unwrap();
        assert_eq!(q.zero_weight_fraction, 0.0);
        assert_eq!(q.param_bits, 0);
        assert_eq!(q.edge_formats.len(), 1);
    }

    #[test]
    fn empty_calibration_is_an_error() {
        let ir = one_fc(vec![0.1; 4]);
        let cfg = QuantConfig::new(Datatype::new(8, 8).unwrap());
        assert_eq!(quantize_model(&ir, &cfg, &[]).err(), Some(QuantError::EmptyCalibration));
    }

    proptest! {
        #[test]
        fn half_ulp_bound(total in 2u32..=32, frac_seed in 0u32..32, x in -1.0e4f64..1.0e4) {
            let f = fmt(total, frac_seed % total);
            prop_assume!(x >= f.min_value() && x <= f.max_value());
            let err = (f.dequantize(quantize_value(x, f).unwrap()) - x).abs();
            prop_assert!(err <= f.step() / 2.0);
        }

        #[test]
        fn monotone_in_x(total in 2u32..=32, frac_seed in 0u32..32, a in -1.0e3f64..1.0e3, b in -1.0e3f64..1.0e3) {
            let f = fmt(total, frac_seed % total);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(lo, f).unwrap() <= quantize_value(hi, f).unwrap());
        }

        #[test]
        fn gaussian_like_values_round_within_half_step(values in proptest::collection::vec(-4.0f32..4.0, 1..200)) {
            let f = calibrate_format(&values, 16).unwrap();
            for &v in &values {
                let err = (f.dequantize(quantize_value(f64::from(v), f).unwrap()) - f64::from(v)).abs();
                prop_assert!(err <= f.step() / 2.0);
            }
        }
    }
}

//! Direct layer-by-layer inference, used as the oracle for the streaming
//! simulator and for calibration.

use crate::ir::{LayerOp, ModelIR, Shape};
use crate::quant::QuantizedModel;

use super::arith::{mac, MacFormats};
use super::window::{gather_window, WindowGeometry};

fn chw(shape: Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Chw { c, h, w } => (c, h, w),
        Shape::Flat(n) => (n, 1, 1),
    }
}

fn window_geometry(shape: Shape, kernel: usize, stride: usize, pad: usize) -> WindowGeometry {
    let (c, h, w) = chw(shape);
    WindowGeometry {
        channels: c,
        height: h,
        width: w,
        kernel,
        stride,
        pad,
    }
}

/// Float32 activations of every edge; element 0 is the input.
pub fn float_activations(ir: &ModelIR, image: &[f32]) -> Vec<Vec<f32>> {
    assert_eq!(image.len(), ir.input_shape.len(), "image size does not match the model input");
    let mut acts = vec![image.to_vec()];
    for layer in &ir.layers {
        let x = acts.last().unwrap();
        let y = match layer.op {
            LayerOp::Conv { kernel, stride, pad, out_channels } => {
                let (c, h, w) = chw(layer.input_shape);
                let (_, ho, wo) = chw(layer.output_shape);
                let wts = &layer.weights.as_ref().unwrap().data;
                let bias = layer.bias.as_ref().unwrap();
                let mut y = vec![0f32; out_channels * ho * wo];
                for o in 0..out_channels {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bias[o];
                            for ci in 0..c {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                            continue;
                                        }
                                        let xv = x[ci * h * w + iy as usize * w + ix as usize];
                                        acc += wts[((o * c + ci) * kernel + ky) * kernel + kx] * xv;
                                    }
                                }
                            }
                            y[(o * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
                y
            }
            LayerOp::MaxPool { window, stride } => {
                let (c, h, w) = chw(layer.input_shape);
                let (_, ho, wo) = chw(layer.output_shape);
                let mut y = vec![f32::NEG_INFINITY; c * ho * wo];
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let out = &mut y[(ci * ho + oy) * wo + ox];
                            for ky in 0..window {
                                for kx in 0..window {
                                    *out = out.max(x[ci * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                                }
                            }
                        }
                    }
                }
                y
            }
            LayerOp::ScaleShift => {
                let (c, h, w) = chw(layer.input_shape);
                let (a, b) = (layer.scale.as_ref().unwrap(), layer.bias.as_ref().unwrap());
                (0..c * h * w).map(|i| a[i / (h * w)] * x[i] + b[i / (h * w)]).collect()
            }
            LayerOp::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            LayerOp::Flatten => x.clone(),
            LayerOp::FullyConnected { in_features, out_features } => {
                let wts = &layer.weights.as_ref().unwrap().data;
                let bias = layer.bias.as_ref().unwrap();
                (0..out_features)
                    .map(|o| {
                        let row = &wts[o * in_features..(o + 1) * in_features];
                        bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
                    })
                    .collect()
            }
        };
        acts.push(y);
    }
    acts
}

/// Float32 model output.
pub fn float_inference(ir: &ModelIR, image: &[f32]) -> Vec<f32> {
    float_activations(ir, image).pop().unwrap()
}

/// Integer codes of every edge; element 0 is the (already quantized) input.
pub fn quantized_activations(model: &QuantizedModel, input: &[i32]) -> Vec<Vec<i32>> {
    let ir = &model.ir;
    assert_eq!(input.len(), ir.input_shape.len(), "input size does not match the model input");
    let mut acts = vec![input.to_vec()];
    for (i, layer) in ir.layers.iter().enumerate() {
        let x = acts.last().unwrap();
        let q = &model.layers[i];
        let in_fmt = model.edge_formats[i];
        let out_fmt = model.edge_formats[i + 1];
        let y = match layer.op {
            LayerOp::Conv { kernel, stride, pad, out_channels } => {
                let g = window_geometry(layer.input_shape, kernel, stride, pad);
                let (w, b) = (q.weights.as_ref().unwrap(), q.bias.as_ref().unwrap());
                let f = MacFormats {
                    input: in_fmt,
                    weight: w.format,
                    bias: b.format,
                    output: out_fmt,
                };
                let (ho, wo) = (g.out_height(), g.out_width());
                let n = g.window_len();
                let mut y = vec![0; out_channels * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let win = gather_window(x, &g, oy, ox);
                        for o in 0..out_channels {
                            y[(o * ho + oy) * wo + ox] = mac(&win, &w.codes[o * n..(o + 1) * n], b.codes[o], &f).0;
                        }
                    }
                }
                y
            }
            LayerOp::MaxPool { window, stride } => {
                let g = window_geometry(layer.input_shape, window, stride, 0);
                let (c, ho, wo) = (g.channels, g.out_height(), g.out_width());
                let mut y = vec![0; c * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let win = gather_window(x, &g, oy, ox);
                        for ci in 0..c {
                            let k2 = window * window;
                            y[(ci * ho + oy) * wo + ox] = *win[ci * k2..(ci + 1) * k2].iter().max().unwrap();
                        }
                    }
                }
                y
            }
            LayerOp::ScaleShift => {
                let (c, h, w) = chw(layer.input_shape);
                let (a, b) = (q.scale.as_ref().unwrap(), q.bias.as_ref().unwrap());
                let f = MacFormats {
                    input: in_fmt,
                    weight: a.format,
                    bias: b.format,
                    output: out_fmt,
                };
                let plane = h * w;
                (0..c * plane)
                    .map(|i| mac(&[x[i]], &[a.codes[i / plane]], b.codes[i / plane], &f).0)
                    .collect()
            }
            LayerOp::Relu => x.iter().map(|&v| v.max(0)).collect(),
            LayerOp::Flatten => x.clone(),
            LayerOp::FullyConnected { in_features, out_features } => {
                let (w, b) = (q.weights.as_ref().unwrap(), q.bias.as_ref().unwrap());
                let f = MacFormats {
                    input: in_fmt,
                    weight: w.format,
                    bias: b.format,
                    output: out_fmt,
                };
                (0..out_features)
                    .map(|o| mac(x, &w.codes[o * in_features..(o + 1) * in_features], b.codes[o], &f).0)
                    .collect()
            }
        };
        acts.push(y);
    }
    acts
}

/// Integer model output for quantized input codes.
pub fn reference_inference(model: &QuantizedModel, input: &[i32]) -> Vec<i32> {
    quantized_activations(model, input).pop().unwrap()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

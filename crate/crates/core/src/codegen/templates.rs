//! Source and descriptor templates, one per actor class.

use std::fmt::Write;
use std::sync::LazyLock;

use regex::Regex;

use crate::ir::Shape;
use crate::quant::{FixedPointFormat, QuantizedTensor};
use crate::sim::{Actor, ActorKind, MacFormats};

use super::{ident, CodegenError};

const HEADER: &str = "#include <ap_int.h>\n#include <hls_stream.h>\n";
const CODES_PER_LINE: usize = 16;

fn dims(s: &Shape) -> (usize, usize, usize) {
    match *s {
        Shape::Chw { c, h, w } => (c, h, w),
        Shape::Flat(n) => (n, 1, 1),
    }
}

/// `static const ap_int<W> name[N] = {...};` with the tensor's codes.
pub fn parameter_table(actor: &str, name: &str, t: &QuantizedTensor) -> Result<String, CodegenError> {
    let bits = t.format.total_bits;
    if let Some(&code) = t.codes.iter().find(|&&c| !t.format.contains(i64::from(c))) {
        return Err(CodegenError::UnrepresentableParameter {
            actor: actor.to_string(),
            code,
            bits,
        });
    }
    let mut s = format!("static const ap_int<{bits}> {name}[{}] = {{\n", t.codes.len());
    for chunk in t.codes.chunks(CODES_PER_LINE) {
        let line: Vec<String> = chunk.iter().map(i32::to_string).collect();
        let _ = writeln!(s, "    {},", line.join(", "));
    }
    s.push_str("};\n");
    Ok(s)
}

static TABLE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"static const ap_int<(\d+)> \w+\[(\d+)\] = \{([^}]*)\};").unwrap());

/// Sum of `bits x entries` over every parameter table in `source`.
///
/// Counts the entries actually present, so a table whose declared length
/// disagrees with its initializer is still measured by its contents.
pub fn embedded_parameter_bits(source: &str) -> u64 {
    TABLE
        .captures_iter(source)
        .map(|c| {
            let bits: u64 = c[1].parse().unwrap();
            let entries = c[3].split(',').filter(|v| !v.trim().is_empty()).count() as u64;
            bits * entries
        })
        .sum()
}

fn define(s: &mut String, name: &str, v: impl std::fmt::Display) {
    let _ = writeln!(s, "#define {name} {v}");
}

fn fmt_defines(s: &mut String, prefix: &str, f: &FixedPointFormat) {
    define(s, &format!("{prefix}_BITS"), f.total_bits);
    define(s, &format!("{prefix}_FRAC"), f.frac_bits);
}

fn shape_defines(s: &mut String, prefix: &str, shape: &Shape) {
    let (c, h, w) = dims(shape);
    define(s, &format!("{prefix}_C"), c);
    define(s, &format!("{prefix}_H"), h);
    define(s, &format!("{prefix}_W"), w);
}

fn mac_defines(s: &mut String, f: &MacFormats) {
    fmt_defines(s, "IN", &f.input);
    fmt_defines(s, "WGT", &f.weight);
    fmt_defines(s, "BIAS", &f.bias);
    fmt_defines(s, "OUT", &f.output);
    define(s, "ACC_FRAC", f.acc_frac());
}

const MAC_BODY: &str = "\
        ap_int<64> acc = (ap_int<64>)b << (ACC_FRAC - BIAS_FRAC);
        for (int i = 0; i < FAN_IN; i++) {
#pragma HLS PIPELINE II=1
            if (w[i] != 0) acc += (ap_int<64>)x[i] * w[i] << (ACC_FRAC - IN_FRAC - WGT_FRAC);
        }
        out.write(requantize<OUT_BITS>(acc, ACC_FRAC - OUT_FRAC));
";

const REQUANTIZE: &str = "\
template <int B>
static ap_int<B> requantize(ap_int<64> acc, int shift) {
    // round half to even, then saturate
    ap_int<64> q = shift > 0 ? (ap_int<64>)(acc >> shift) : (ap_int<64>)(acc << -shift);
    if (shift > 0) {
        ap_int<64> rem = acc - (q << shift);
        ap_int<64> half = (ap_int<64>)1 << (shift - 1);
        if (rem > half || (rem == half && (q & 1))) q++;
    }
    const ap_int<64> hi = ((ap_int<64>)1 << (B - 1)) - 1;
    const ap_int<64> lo = -hi - 1;
    return q > hi ? hi : (q < lo ? lo : q);
}
";

/// Instantiated C++ source for one actor.
pub fn actor_source(actor: &Actor) -> Result<String, CodegenError> {
    let top = ident(&actor.name);
    let mut s = format!("// {} ({})\n{HEADER}\n", actor.name, actor.kind.class());
    match &actor.kind {
        ActorKind::Source { shape, format } => {
            shape_defines(&mut s, "OUT", shape);
            fmt_defines(&mut s, "OUT", format);
            let _ = write!(
                s,
                "
void {top}(hls::stream<ap_int<OUT_BITS> > &dma, hls::stream<ap_int<OUT_BITS> > &out) {{
#pragma HLS INTERFACE axis port=dma
#pragma HLS INTERFACE axis port=out
    // CHW frame in, HWC pixel tokens out
    static ap_int<OUT_BITS> frame[OUT_C][OUT_H * OUT_W];
    for (int c = 0; c < OUT_C; c++)
        for (int p = 0; p < OUT_H * OUT_W; p++) frame[c][p] = dma.read();
    for (int p = 0; p < OUT_H * OUT_W; p++)
        for (int c = 0; c < OUT_C; c++) out.write(frame[c][p]);
}}
"
            );
        }
        ActorKind::Sink { shape, format } => {
            shape_defines(&mut s, "IN", shape);
            fmt_defines(&mut s, "IN", format);
            let _ = write!(
                s,
                "
void {top}(hls::stream<ap_int<IN_BITS> > &in, hls::stream<ap_int<IN_BITS> > &dma) {{
#pragma HLS INTERFACE axis port=in
#pragma HLS INTERFACE axis port=dma
    for (int i = 0; i < IN_C * IN_H * IN_W; i++) dma.write(in.read());
}}
"
            );
        }
        ActorKind::Relu { shape, format } | ActorKind::Route { shape, format } => {
            shape_defines(&mut s, "IO", shape);
            fmt_defines(&mut s, "IO", format);
            let op = if matches!(actor.kind, ActorKind::Relu { .. }) {
                "v < 0 ? (ap_int<IO_BITS>)0 : v"
            } else {
                "v"
            };
            let _ = write!(
                s,
                "
void {top}(hls::stream<ap_int<IO_BITS> > &in, hls::stream<ap_int<IO_BITS> > &out) {{
    for (int i = 0; i < IO_C; i++) {{
#pragma HLS PIPELINE II=1
        ap_int<IO_BITS> v = in.read();
        out.write({op});
    }}
}}
"
            );
        }
        ActorKind::LineBuffer { input, kernel, stride, pad, format } => {
            shape_defines(&mut s, "IN", input);
            fmt_defines(&mut s, "IN", format);
            define(&mut s, "K", kernel);
            define(&mut s, "STRIDE", stride);
            define(&mut s, "PAD", pad);
            let _ = write!(
                s,
                "
void {top}(hls::stream<ap_int<IN_BITS> > &in, hls::stream<ap_int<IN_BITS> > &out) {{
    // K rows of the zero-padded plane; a window leaves once its last pixel arrives
    static ap_int<IN_BITS> rows[K][IN_W + 2 * PAD][IN_C];
#pragma HLS ARRAY_PARTITION variable=rows complete dim=1
    for (int y = 0; y < IN_H + 2 * PAD; y++) {{
        for (int x = 0; x < IN_W + 2 * PAD; x++) {{
            bool inside = y >= PAD && y < IN_H + PAD && x >= PAD && x < IN_W + PAD;
            for (int c = 0; c < IN_C; c++) rows[y % K][x][c] = inside ? in.read() : (ap_int<IN_BITS>)0;
            int oy = y - (K - 1), ox = x - (K - 1);
            if (oy < 0 || ox < 0 || oy % STRIDE || ox % STRIDE) continue;
            for (int c = 0; c < IN_C; c++)
                for (int ky = 0; ky < K; ky++)
                    for (int kx = 0; kx < K; kx++) out.write(rows[(oy + ky) % K][ox + kx][c]);
        }}
    }}
}}
"
            );
        }
        ActorKind::WeightStore { weights } | ActorKind::BiasStore { bias: weights } => {
            fmt_defines(&mut s, "OUT", &weights.format);
            define(&mut s, "LEN", weights.len());
            s.push('\n');
            s.push_str(&parameter_table(&actor.name, &format!("{top}_codes"), weights)?);
            let _ = write!(
                s,
                "
void {top}(hls::stream<ap_int<OUT_BITS> > &out) {{
    for (int i = 0; i < LEN; i++) {{
#pragma HLS PIPELINE II=1
        out.write({top}_codes[i]);
    }}
}}
"
            );
        }
        ActorKind::Conv { input, output, kernel, formats } => {
            shape_defines(&mut s, "IN", input);
            shape_defines(&mut s, "OUT", output);
            define(&mut s, "K", kernel);
            define(&mut s, "FAN_IN", dims(input).0 * kernel * kernel);
            mac_defines(&mut s, formats);
            let _ = write!(
                s,
                "
{REQUANTIZE}
void {top}(hls::stream<ap_int<IN_BITS> > &in, hls::stream<ap_int<WGT_BITS> > &weights,
          hls::stream<ap_int<BIAS_BITS> > &bias, hls::stream<ap_int<OUT_BITS> > &out) {{
    ap_int<IN_BITS> x[FAN_IN];
    for (int i = 0; i < FAN_IN; i++) x[i] = in.read();
    for (int o = 0; o < OUT_C; o++) {{
        ap_int<WGT_BITS> w[FAN_IN];
        for (int i = 0; i < FAN_IN; i++) w[i] = weights.read();
        ap_int<BIAS_BITS> b = bias.read();
{MAC_BODY}    }}
}}
"
            );
        }
        ActorKind::FullyConnected { weights, bias, formats } => {
            define(&mut s, "FAN_IN", weights.shape.get(1).copied().unwrap_or(1));
            define(&mut s, "OUT_N", bias.len());
            mac_defines(&mut s, formats);
            s.push('\n');
            s.push_str(&parameter_table(&actor.name, &format!("{top}_weights"), weights)?);
            s.push_str(&parameter_table(&actor.name, &format!("{top}_bias"), bias)?);
            let _ = write!(
                s,
                "
{REQUANTIZE}
void {top}(hls::stream<ap_int<IN_BITS> > &in, hls::stream<ap_int<OUT_BITS> > &out) {{
    ap_int<IN_BITS> x[FAN_IN];
    for (int i = 0; i < FAN_IN; i++) x[i] = in.read();
    for (int o = 0; o < OUT_N; o++) {{
        const ap_int<WGT_BITS> *w = &{top}_weights[o * FAN_IN];
        ap_int<BIAS_BITS> b = {top}_bias[o];
{MAC_BODY}    }}
}}
"
            );
        }
        ActorKind::ScaleShift { shape, scale, shift, input_format, output_format } => {
            shape_defines(&mut s, "IO", shape);
            let f = MacFormats {
                input: *input_format,
                weight: scale.format,
                bias: shift.format,
                output: *output_format,
            };
            define(&mut s, "FAN_IN", 1);
            mac_defines(&mut s, &f);
            s.push('\n');
            s.push_str(&parameter_table(&actor.name, &format!("{top}_scale"), scale)?);
            s.push_str(&parameter_table(&actor.name, &format!("{top}_shift"), shift)?);
            let _ = write!(
                s,
                "
{REQUANTIZE}
void {top}(hls::stream<ap_int<IN_BITS> > &in, hls::stream<ap_int<OUT_BITS> > &out) {{
    for (int c = 0; c < IO_C; c++) {{
        ap_int<IN_BITS> x[1] = {{in.read()}};
        const ap_int<WGT_BITS> *w = &{top}_scale[c];
        ap_int<BIAS_BITS> b = {top}_shift[c];
{MAC_BODY}    }}
}}
"
            );
        }
        ActorKind::MaxPool { input, output, window, stride, format } => {
            shape_defines(&mut s, "IN", input);
            shape_defines(&mut s, "OUT", output);
            fmt_defines(&mut s, "IO", format);
            define(&mut s, "WIN", window);
            define(&mut s, "STRIDE", stride);
            let _ = write!(
                s,
                "
void {top}(hls::stream<ap_int<IO_BITS> > &in, hls::stream<ap_int<IO_BITS> > &out) {{
    static ap_int<IO_BITS> rows[WIN][IN_W][IN_C];
    for (int y = 0; y < IN_H; y++) {{
        for (int x = 0; x < IN_W; x++) {{
            for (int c = 0; c < IN_C; c++) rows[y % WIN][x][c] = in.read();
            int oy = y - (WIN - 1), ox = x - (WIN - 1);
            if (oy < 0 || ox < 0 || oy % STRIDE || ox % STRIDE) continue;
            for (int c = 0; c < IN_C; c++) {{
                ap_int<IO_BITS> m = rows[oy % WIN][ox][c];
                for (int ky = 0; ky < WIN; ky++)
                    for (int kx = 0; kx < WIN; kx++) {{
                        ap_int<IO_BITS> v = rows[(oy + ky) % WIN][ox + kx][c];
                        if (v > m) m = v;
                    }}
                out.write(m);
            }}
        }}
    }}
}}
"
            );
        }
        ActorKind::Flatten { input, format } => {
            shape_defines(&mut s, "IN", input);
            fmt_defines(&mut s, "IO", format);
            let _ = write!(
                s,
                "
void {top}(hls::stream<ap_int<IO_BITS> > &in, hls::stream<ap_int<IO_BITS> > &out) {{
    // HWC stream in, CHW vector out
    static ap_int<IO_BITS> buf[IN_C][IN_H * IN_W];
    for (int p = 0; p < IN_H * IN_W; p++)
        for (int c = 0; c < IN_C; c++) buf[c][p] = in.read();
    for (int c = 0; c < IN_C; c++)
        for (int p = 0; p < IN_H * IN_W; p++) out.write(buf[c][p]);
}}
"
            );
        }
    }
    Ok(s)
}

/// Symbolic port table for a class: `(direction, port, token, elements, rate)`.
fn class_ports(class: &str) -> &'static [(&'static str, &'static str, &'static str, &'static str, &'static str)] {
    match class {
        "Source" => &[("output", "out", "pixel", "OUT_C", "1")],
        "Sink" => &[("input", "in", "pixel", "IN_C", "1")],
        "Relu" | "Route" => &[("input", "in", "pixel", "IO_C", "1"), ("output", "out", "pixel", "IO_C", "1")],
        "LineBuffer" => &[
            ("input", "in", "pixel", "IN_C", "0..1"),
            ("output", "out", "window", "IN_C*K*K", "0..1"),
        ],
        "WeightStore" | "BiasStore" => &[("output", "out", "tensor", "LEN", "1")],
        "Conv" => &[
            ("input", "in", "window", "IN_C*K*K", "1"),
            ("input", "weights", "tensor", "OUT_C*IN_C*K*K", "1"),
            ("input", "bias", "tensor", "OUT_C", "1"),
            ("output", "out", "pixel", "OUT_C", "1"),
        ],
        "ScaleShift" => &[("input", "in", "pixel", "IO_C", "1"), ("output", "out", "pixel", "IO_C", "1")],
        "MaxPool" => &[
            ("input", "in", "pixel", "IN_C", "0..1"),
            ("output", "out", "pixel", "OUT_C", "0..1"),
        ],
        "Flatten" => &[
            ("input", "in", "pixel", "IN_C", "1"),
            ("output", "out", "vector", "IN_C*IN_H*IN_W", "0..1"),
        ],
        "FullyConnected" => &[("input", "in", "vector", "FAN_IN", "1"), ("output", "out", "vector", "OUT_N", "1")],
        _ => &[],
    }
}

/// Interface descriptor for one actor class, listing every instance's
/// hyperparameters so the symbolic widths can be resolved.
pub fn descriptor(class: &str, actors: &[&Actor]) -> String {
    let mut s = format!("actor {class}\n");
    for (dir, port, token, elems, rate) in class_ports(class) {
        let _ = writeln!(s, "  {dir} {port}: {token} token of {elems} x ap_int<BITS>, rate {rate}");
    }
    for a in actors {
        let params: Vec<String> = a.kind.parameters().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "instance {} {}", a.name, params.join(" "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_bits_are_counted() {
        let t = QuantizedTensor {
            shape: vec![3],
            format: FixedPointFormat::new(4, 2).unwrap(),
            codes: vec![1, -8, 7],
        };
        let text = parameter_table("a", "a_codes", &t).unwrap();
        assert!(text.starts_with("static const ap_int<4> a_codes[3] = {"));
        assert_eq!(embedded_parameter_bits(&text), 12);
    }

    #[test]
    fn out_of_range_codes_are_rejected() {
        let t = QuantizedTensor {
            shape: vec![1],
            format: FixedPointFormat::new(4, 2).unwrap(),
            codes: vec![9],
        };
        assert!(matches!(
            parameter_table("a", "t", &t),
            Err(CodegenError::UnrepresentableParameter { code: 9, bits: 4, .. })
        ));
    }
}

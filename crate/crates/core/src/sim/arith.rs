//! Integer multiply-accumulate and requantization shared by the streaming
//! actors and the direct reference inference.

use crate::quant::FixedPointFormat;

/// Width of an exact MAC accumulator for `fan_in` products.
pub fn accumulator_bits(act_bits: u32, weight_bits: u32, fan_in: usize) -> u32 {
    let log = usize::BITS - fan_in.max(1).saturating_sub(1).leading_zeros();
    act_bits + weight_bits + log + 1
}

/// Arithmetic right shift rounding half to even.
pub fn shift_round_half_even(value: i128, shift: u32) -> i128 {
    if shift == 0 {
        return value;
    }
    let q = value >> shift;
    let rem = value - (q << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Converts an accumulator with `acc_frac` fraction bits to a code in `out`.
pub fn requantize(acc: i128, acc_frac: u32, out: FixedPointFormat) -> i32 {
    let (min, max) = (i128::from(out.min_code()), i128::from(out.max_code()));
    let value = if acc_frac >= out.frac_bits {
        shift_round_half_even(acc, acc_frac - out.frac_bits)
    } else {
        // saturate first so the left shift cannot overflow
        acc.clamp(min, max) << (out.frac_bits - acc_frac)
    };
    value.clamp(min, max) as i32
}

/// Operand formats of one multiply-accumulate unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacFormats {
    pub input: FixedPointFormat,
    pub weight: FixedPointFormat,
    pub bias: FixedPointFormat,
    pub output: FixedPointFormat,
}

impl MacFormats {
    fn product_frac(&self) -> u32 {
        self.input.frac_bits + self.weight.frac_bits
    }

    pub fn acc_frac(&self) -> u32 {
        self.product_frac().max(self.bias.frac_bits)
    }
}

/// `sum(x_i * w_i) + b`, requantized. Returns the output code and the number
/// of products whose weight operand is zero.
pub fn mac(inputs: &[i32], weights: &[i32], bias: i32, f: &MacFormats) -> (i32, u64) {
    debug_assert_eq!(inputs.len(), weights.len());
    let mut acc: i128 = 0;
    let mut zeros = 0u64;
    for (&x, &w) in inputs.iter().zip(weights) {
        if w == 0 {
            zeros += 1;
        }
        acc += i128::from(x) * i128::from(w);
    }
    let acc_frac = f.acc_frac();
    let acc = (acc << (acc_frac - f.product_frac())) + (i128::from(bias) << (acc_frac - f.bias.frac_bits));
    (requantize(acc, acc_frac, f.output), zeros)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_value;
    use proptest::prelude::*;

    fn fmt(total: u32, frac: u32) -> FixedPointFormat {
        FixedPointFormat::new(total, frac).unwrap()
    }

    #[test]
    fn accumulator_sizing() {
        assert_eq!(accumulator_bits(16, 8, 1), 25);
        assert_eq!(accumulator_bits(16, 8, 9), 16 + 8 + 4 + 1);
        assert_eq!(accumulator_bits(8, 8, 16), 8 + 8 + 4 + 1);
    }

    #[test]
    fn half_even_shift() {
        assert_eq!(shift_round_half_even(5, 1), 2);
        assert_eq!(shift_round_half_even(7, 1), 4);
        assert_eq!(shift_round_half_even(-5, 1), -2);
        assert_eq!(shift_round_half_even(-7, 1), -4);
        assert_eq!(shift_round_half_even(-6, 2), -2);
        assert_eq!(shift_round_half_even(13, 3), 2);
    }

    #[test]
    fn identity_multiply() {
        let f = MacFormats {
            input: fmt(8, 6),
            weight: fmt(8, 6),
            bias: fmt(8, 6),
            output: fmt(8, 6),
        };
        assert_eq!(mac(&[32], &[64], 0, &f), (32, 0));
    }

    #[test]
    fn zero_window_gives_requantized_bias() {
        let f = MacFormats {
            input: fmt(16, 10),
            weight: fmt(8, 7),
            bias: fmt(8, 5),
            output: fmt(16, 12),
        };
        let (code, zeros) = mac(&[0; 9], &[3; 9], -13, &f);
        assert_eq!(zeros, 0);
        assert_eq!(code, quantize_value(-13.0 / 32.0, f.output).unwrap());
    }

    proptest! {
        // Oracle: exact rational dot product via f64 on small integers, then
        // round-half-even of the real value into the output format.
        #[test]
        fn mac_matches_real_dot_product(
            xs in proptest::collection::vec(-128i32..128, 36),
            ws in proptest::collection::vec(-128i32..128, 36),
            bias in -128i32..128,
            xf in 0u32..8, wf in 0u32..8, bf in 0u32..8, of in 0u32..16,
        ) {
            let f = MacFormats { input: fmt(16, xf), weight: fmt(8, wf), bias: fmt(8, bf), output: fmt(16, of) };
            let real: f64 = xs.iter().zip(&ws)
                .map(|(&x, &w)| f64::from(x) * f64::from(w) * (-f64::from(xf + wf)).exp2())
                .sum::<f64>() + f64::from(bias) * (-f64::from(bf)).exp2();
            let expected = quantize_value(real, f.output).unwrap();
            prop_assert_eq!(mac(&xs, &ws, bias, &f).0, expected);
        }
    }
}

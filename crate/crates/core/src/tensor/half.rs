//! Software IEEE-754 binary16 conversion.
//!
//! Values are kept in `f32` storage; a tensor tagged [`Precision::Fp16E`] only
//! ever holds values that survive a round trip through binary16 unchanged.
//!
//! [`Precision::Fp16E`]: super::Precision::Fp16E

use super::{Precision, Tensor};

const F32_EXP_MASK: u32 = 0x7F80_0000;
const F32_ABS_MASK: u32 = 0x7FFF_FFFF;
/// Smallest normal binary16 value, 2^-14, as f32 bits.
const F16_MIN_NORMAL_AS_F32: u32 = 0x3880_0000;
/// Difference between the f32 and f16 exponent biases, aligned to the f32 exponent field.
const REBIAS: u32 = (127 - 15) << 23;

/// Rounds an `f32` to the nearest binary16 value (ties to even) and returns its bits.
///
/// Values whose magnitude rounds past 65504 become infinities. NaNs stay NaN with
/// the quiet bit set and the top payload bits preserved.
pub fn f32_to_f16_bits(value: f32) -> u16 {
    let bits = value.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let abs = bits & F32_ABS_MASK;

    if abs & F32_EXP_MASK == F32_EXP_MASK {
        let payload = abs & 0x007F_FFFF;
        if payload == 0 {
            return sign | 0x7C00;
        }
        return sign | 0x7E00 | (payload >> 13) as u16;
    }

    if abs < F16_MIN_NORMAL_AS_F32 {
        // Subnormal range: the binary16 mantissa counts multiples of 2^-24.
        // Scaling by a power of two is exact, so a single rounding happens here.
        let scaled = f32::from_bits(abs) * 16_777_216.0;
        let mantissa = scaled.round_ties_even() as u16;
        // A carry to 1024 lands exactly on the smallest normal encoding.
        return sign | mantissa;
    }

    let rebased = abs - REBIAS;
    let lsb = (rebased >> 13) & 1;
    let rounded = (rebased + 0x0FFF + lsb) >> 13;
    if rounded >= 0x7C00 {
        return sign | 0x7C00;
    }
    sign | rounded as u16
}

/// Widens binary16 bits to `f32`; exact for every input.
pub fn f16_bits_to_f32(half: u16) -> f32 {
    let sign = ((half & 0x8000) as u32) << 16;
    let exp = (half >> 10) & 0x1F;
    let mantissa = (half & 0x03FF) as u32;
    match exp {
        0 => {
            let magnitude = mantissa as f32 * (1.0 / 16_777_216.0);
            f32::from_bits(sign | magnitude.to_bits())
        }
        0x1F => f32::from_bits(sign | F32_EXP_MASK | (mantissa << 13)),
        _ => f32::from_bits(sign | ((((half & 0x7FFF) as u32) << 13) + REBIAS)),
    }
}

/// Rounds to the nearest binary16 value, returned in `f32` storage.
#[inline]
pub fn round_f16(value: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(value))
}

/// Whether `value` round-trips through binary16 unchanged.
pub fn is_f16_exact(value: f32) -> bool {
    let back = round_f16(value);
    back.to_bits() == value.to_bits() || (value.is_nan() && back.is_nan())
}

/// Rounds every element to binary16 and tags the result [`Precision::Fp16E`].
///
/// Idempotent: applying it to an already-quantized tensor changes nothing.
pub fn quantize_fp16(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| round_f16(v)).collect();
    Tensor::from_parts(t.shape().to_vec(), data, Precision::Fp16E)
}

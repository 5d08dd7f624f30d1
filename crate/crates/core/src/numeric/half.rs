//! Software emulation of IEEE 754 binary16.
//!
//! Values are carried as `f64` and snapped onto the binary16 grid with
//! round-to-nearest-even. Every binary16 value is exactly representable as an
//! `f64`, and a single correctly rounded `f64` operation followed by
//! [`round_half`] yields the correctly rounded binary16 result for `+ - * /`
//! and `sqrt` (53 >= 2 * 11 + 2 bits, so the double rounding is harmless).

/// Largest finite binary16 value.
pub const HALF_MAX: f64 = 65504.0;
/// Smallest positive normal binary16 value (2^-14).
pub const HALF_MIN_POSITIVE: f64 = 6.103_515_625e-5;
/// Smallest positive subnormal binary16 value (2^-24).
pub const HALF_MIN_SUBNORMAL: f64 = 5.960_464_477_539_063e-8;

/// Magnitudes at or above this round to infinity (midpoint between
/// `HALF_MAX` and 2^16, which ties to the even neighbour 2^16).
const OVERFLOW_THRESHOLD: f64 = 65520.0;

/// Rounds `value` to the nearest binary16 value, ties to even.
///
/// Magnitudes that round above [`HALF_MAX`] become signed infinity, subnormals
/// are preserved, NaN stays NaN and the sign of zero is kept.
#[inline]
pub fn round_half(value: f64) -> f64 {
    if !value.is_finite() || value == 0.0 {
        return value;
    }
    let magnitude = value.abs();
    if magnitude >= OVERFLOW_THRESHOLD {
        return f64::INFINITY.copysign(value);
    }
    let biased = ((magnitude.to_bits() >> 52) & 0x7ff) as i32;
    let exponent = biased - 1023;
    // Spacing of the binary16 grid around `magnitude`.
    let quantum_exp = if exponent < -14 { -24 } else { exponent - 10 };
    let quantum = pow2(quantum_exp);
    let rounded = (magnitude / quantum).round_ties_even() * quantum;
    rounded.copysign(value)
}

/// True when `value` lies exactly on the binary16 grid (infinities included,
/// NaN excluded).
#[inline]
pub fn is_half_representable(value: f64) -> bool {
    !value.is_nan() && round_half(value).to_bits() == value.to_bits()
}

/// Encodes a value (rounded first) as binary16 bits.
pub fn to_half_bits(value: f64) -> u16 {
    if value.is_nan() {
        return 0x7e00;
    }
    let v = round_half(value);
    let sign: u16 = if v.is_sign_negative() { 0x8000 } else { 0 };
    let a = v.abs();
    if a.is_infinite() {
        return sign | 0x7c00;
    }
    if a == 0.0 {
        return sign;
    }
    if a < HALF_MIN_POSITIVE {
        let mantissa = (a / HALF_MIN_SUBNORMAL) as u16;
        return sign | mantissa;
    }
    let exponent = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let mantissa = ((a / pow2(exponent) - 1.0) * 1024.0) as u16;
    sign | (((exponent + 15) as u16) << 10) | mantissa
}

/// Decodes binary16 bits into the exact `f64` value.
pub fn from_half_bits(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exponent = ((bits >> 10) & 0x1f) as i32;
    let mantissa = (bits & 0x3ff) as f64;
    let magnitude = match exponent {
        0 => mantissa * HALF_MIN_SUBNORMAL,
        0x1f if mantissa == 0.0 => f64::INFINITY,
        0x1f => f64::NAN,
        e => (1.0 + mantissa / 1024.0) * pow2(e - 15),
    };
    sign * magnitude
}

#[inline]
fn pow2(exp: i32) -> f64 {
    f64::from_bits(((exp + 1023) as u64) << 52)
}

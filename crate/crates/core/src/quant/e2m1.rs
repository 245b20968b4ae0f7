//! E2M1: the 4-bit float element type shared by FP4, NVFP4 and MXFP4.
//!
//! Code layout is `s ee m` (sign in bit 3). The eight magnitudes are
//! `0, 0.5, 1, 1.5, 2, 3, 4, 6`, so the code index of a magnitude equals its
//! position in [`MAGNITUDES`] and an even code always has a zero mantissa bit.

/// Largest representable magnitude (`q_max`).
pub const E2M1_MAX: f64 = 6.0;

/// Non-negative E2M1 magnitudes indexed by the low three code bits.
pub const MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

const SIGN_BIT: u8 = 0b1000;

/// Decodes a 4-bit code. Only the low nibble is inspected.
#[inline]
pub fn decode(code: u8) -> f64 {
    let m = MAGNITUDES[(code & 0b0111) as usize];
    if code & SIGN_BIT != 0 {
        -m
    } else {
        m
    }
}

/// Encodes to the nearest E2M1 value, ties to the even mantissa, saturating
/// at ±6. The sign of the input is kept, so small negatives become `-0`.
#[inline]
pub fn encode(x: f64) -> u8 {
    let sign = if x.is_sign_negative() { SIGN_BIT } else { 0 };
    let a = x.abs();
    let mut idx = 0u8;
    for i in 1..MAGNITUDES.len() {
        let mid = 0.5 * (MAGNITUDES[i - 1] + MAGNITUDES[i]);
        if a > mid || (a == mid && i % 2 == 0) {
            idx = i as u8;
        } else {
            break;
        }
    }
    sign | idx
}

/// Half of the gap to the nearest neighbour magnitude around `code`, i.e.
/// the largest rounding error an in-range input mapped to `code` can carry.
pub fn half_spacing(code: u8) -> f64 {
    let i = (code & 0b0111) as usize;
    let below = if i > 0 { MAGNITUDES[i] - MAGNITUDES[i - 1] } else { 0.0 };
    let above = if i + 1 < MAGNITUDES.len() { MAGNITUDES[i + 1] - MAGNITUDES[i] } else { 0.0 };
    0.5 * below.max(above)
}

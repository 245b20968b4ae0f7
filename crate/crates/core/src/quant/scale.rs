//! 8-bit scale encodings: E4M3 (NVFP4 block scales) and E8M0 (MXFP4).

/// Largest finite E4M3 value (`S1110.110`).
pub const E4M3_MAX: f64 = 448.0;

const E4M3_BIAS: i32 = 7;
const E4M3_MAX_BYTE: u8 = 0x7E;

/// `floor(log2(v))` for positive finite `v`, read from the exponent bits.
pub(crate) fn floor_log2(v: f64) -> i32 {
    debug_assert!(v > 0.0 && v.is_finite());
    let biased = ((v.to_bits() >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal
        v.log2().floor() as i32
    } else {
        biased - 1023
    }
}

/// Rounds a non-negative value to the nearest E4M3 value (ties to even),
/// saturating at 448. Zero, negatives and NaN encode to `+0`.
pub fn e4m3_encode(v: f64) -> u8 {
    if !(v > 0.0) {
        return 0;
    }
    if v >= E4M3_MAX {
        return E4M3_MAX_BYTE;
    }
    let min_normal_exp = 1 - E4M3_BIAS;
    if v < 2f64.powi(min_normal_exp) {
        // subnormal step is 2^-9; q = 8 rolls into the smallest normal
        let q = (v * 2f64.powi(9)).round_ties_even() as u8;
        return q;
    }
    let mut e = floor_log2(v);
    let frac = v / 2f64.powi(e) - 1.0;
    let mut q = (frac * 8.0).round_ties_even() as i32;
    if q == 8 {
        q = 0;
        e += 1;
    }
    if e > 8 || (e == 8 && q > 6) {
        return E4M3_MAX_BYTE;
    }
    (((e + E4M3_BIAS) as u8) << 3) | q as u8
}

/// Decodes the non-negative half of E4M3. The sign bit is ignored and the
/// NaN pattern saturates to 448, so the decode is total.
pub fn e4m3_decode(byte: u8) -> f64 {
    let b = byte & 0x7F;
    let exp = (b >> 3) as i32;
    let man = (b & 0x7) as f64;
    if b == 0x7F {
        return E4M3_MAX;
    }
    if exp == 0 {
        man * 2f64.powi(-9)
    } else {
        (1.0 + man / 8.0) * 2f64.powi(exp - E4M3_BIAS)
    }
}

/// Every non-negative finite E4M3 value, ascending.
pub fn e4m3_grid() -> Vec<f64> {
    (0u8..=E4M3_MAX_BYTE).map(e4m3_decode).collect()
}

pub const E8M0_BIAS: i32 = 127;

/// Stores `2^exp`; exponents are clamped to the representable `[-127, 127]`.
pub fn e8m0_encode(exp: i32) -> u8 {
    (exp.clamp(-E8M0_BIAS, E8M0_BIAS) + E8M0_BIAS) as u8
}

pub fn e8m0_exponent(byte: u8) -> i32 {
    byte.min(254) as i32 - E8M0_BIAS
}

pub fn e8m0_decode(byte: u8) -> f64 {
    2f64.powi(e8m0_exponent(byte))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e4m3_grid_shape() {
        let g = e4m3_grid();
        assert_eq!(g.len(), 127);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 448.0);
        assert_eq!(g[1], 2f64.powi(-9));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn e4m3_roundtrip_on_grid() {
        for b in 0u8..=E4M3_MAX_BYTE {
            assert_eq!(e4m3_encode(e4m3_decode(b)), b);
        }
    }

    #[test]
    fn e4m3_is_nearest() {
        let grid = e4m3_grid();
        let mut v = 1e-4;
        while v < 500.0 {
            let got = e4m3_decode(e4m3_encode(v));
            let clamped = v.min(448.0);
            let best = grid
                .iter()
                .map(|g| (g - clamped).abs())
                .fold(f64::INFINITY, f64::min);
            assert_eq!((got - clamped).abs(), best, "v = {v}");
            v *= 1.013;
        }
    }

    #[test]
    fn e4m3_ties_to_even() {
        // between 1.0 (m=0) and 1.125 (m=1)
        assert_eq!(e4m3_decode(e4m3_encode(1.0625)), 1.0);
        // between 1.125 (m=1) and 1.25 (m=2)
        assert_eq!(e4m3_decode(e4m3_encode(1.1875)), 1.25);
        // 464 would tie 448 and 480; 480 is not finite so it saturates
        assert_eq!(e4m3_decode(e4m3_encode(464.0)), 448.0);
    }

    #[test]
    fn e8m0_powers() {
        assert_eq!(e8m0_decode(e8m0_encode(0)), 1.0);
        assert_eq!(e8m0_decode(e8m0_encode(1)), 2.0);
        assert_eq!(e8m0_decode(e8m0_encode(-3)), 0.125);
        assert_eq!(e8m0_exponent(e8m0_encode(400)), 127);
    }

    #[test]
    fn floor_log2_exact_near_powers() {
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(f64::from_bits(1.0f64.to_bits() - 1)), -1);
        assert_eq!(floor_log2(12.0), 3);
        assert_eq!(floor_log2(0.75), -1);
    }
}

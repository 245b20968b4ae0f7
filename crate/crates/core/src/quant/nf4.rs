//! 4-bit NormalFloat codebook.
//!
//! Sixteen standard-normal quantiles normalised to `[-1, 1]`, asymmetric so
//! that zero is exactly representable (index 7). Values are the published
//! QLoRA table, stored at full `f32` precision.

pub const NF4_CODEBOOK: [f32; 16] = [
    -1.0,
    -0.696_192_800_998_687_7,
    -0.525_073_051_452_636_7,
    -0.394_917_488_098_144_53,
    -0.284_441_381_692_886_35,
    -0.184_773_430_228_233_34,
    -0.091_050_036_251_544_95,
    0.0,
    0.079_580_299_556_255_34,
    0.160_930_201_411_247_25,
    0.246_112_301_945_686_34,
    0.337_915_241_718_292_24,
    0.440_709_829_330_444_34,
    0.562_617_003_917_694_1,
    0.722_956_836_223_602_3,
    1.0,
];

/// Index of the exact-zero entry.
pub const NF4_ZERO: u8 = 7;

#[inline]
pub fn decode(code: u8) -> f64 {
    NF4_CODEBOOK[(code & 0x0F) as usize] as f64
}

/// Nearest codebook entry for a value already normalised by the block absmax.
/// Midpoint ties resolve to the lower entry.
#[inline]
pub fn encode(x: f64) -> u8 {
    let mut idx = 0u8;
    for i in 1..16 {
        let lo = NF4_CODEBOOK[i - 1] as f64;
        let hi = NF4_CODEBOOK[i] as f64;
        if x > 0.5 * (lo + hi) {
            idx = i as u8;
        } else {
            break;
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebook_shape() {
        assert_eq!(NF4_CODEBOOK[0], -1.0);
        assert_eq!(NF4_CODEBOOK[15], 1.0);
        assert_eq!(NF4_CODEBOOK[NF4_ZERO as usize], 0.0);
        assert!(NF4_CODEBOOK.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn entries_roundtrip() {
        for c in 0u8..16 {
            assert_eq!(encode(decode(c)), c);
        }
        assert_eq!(encode(0.0), NF4_ZERO);
    }

    #[test]
    fn encode_is_nearest_and_monotone() {
        let mut prev = 0u8;
        let mut x = -1.2;
        while x <= 1.2 {
            let c = encode(x);
            assert!(c >= prev);
            prev = c;
            let best = (0u8..16)
                .map(|k| (decode(k) - x).abs())
                .fold(f64::INFINITY, f64::min);
            assert_eq!((decode(c) - x).abs(), best);
            x += 0.0037;
        }
    }
}

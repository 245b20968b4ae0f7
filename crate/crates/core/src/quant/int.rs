use ndarray::{Array2, ArrayView2};

use super::format::{FormatKind, FormatSpec};
use super::tensor::{pack_nibbles, BlockScales, QuantizedTensor, SourceDtype};
use super::QuantError;

/// Asymmetric per-tensor integer quantization with unpacked codes.
#[derive(Clone, Debug, PartialEq)]
pub struct IntQuantized {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub codes: Vec<u8>,
    /// Step size `s_w = (W_max − W_min) / (2^bits − 1)`.
    pub scale: f64,
    pub zero_point: f64,
    /// Set when `W_max = W_min`: codes are all zero, `scale = 1` and the zero
    /// point is `-W_min`, so dequantization returns the constant exactly.
    pub degenerate: bool,
}

/// Integer quantization: `code = clamp(Round(W/s_w) + zp, 0, 2^bits − 1)` with
/// `zp = Round(−W_min/s_w)`. Rounding is half-to-even.
pub fn quantize_int(w: ArrayView2<f64>, bits: u32) -> Result<IntQuantized, QuantError> {
    if !(2..=8).contains(&bits) {
        return Err(QuantError::InvalidBits(bits));
    }
    if let Some(index) = w.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite { index });
    }
    let (rows, cols) = w.dim();
    let qmax = ((1u32 << bits) - 1) as f64;
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if w.is_empty() || hi == lo {
        let c = if w.is_empty() { 0.0 } else { lo };
        return Ok(IntQuantized {
            rows,
            cols,
            bits,
            codes: vec![0; rows * cols],
            scale: 1.0,
            zero_point: -c,
            degenerate: true,
        });
    }
    let scale = (hi - lo) / qmax;
    let zero_point = (-lo / scale).round_ties_even();
    let codes = w
        .iter()
        .map(|&x| ((x / scale).round_ties_even() + zero_point).clamp(0.0, qmax) as u8)
        .collect();
    Ok(IntQuantized {
        rows,
        cols,
        bits,
        codes,
        scale,
        zero_point,
        degenerate: false,
    })
}

impl IntQuantized {
    pub fn dequantize(&self) -> Array2<f64> {
        let data = self
            .codes
            .iter()
            .map(|&c| self.scale * (c as f64 - self.zero_point))
            .collect();
        Array2::from_shape_vec((self.rows, self.cols), data).expect("shape")
    }

    /// Packs a 4-bit result into a [`QuantizedTensor`]. The step size becomes
    /// the FP32 global scale and each row carries the zero point as its FP32
    /// block scale.
    pub fn into_tensor(self) -> Result<QuantizedTensor, QuantError> {
        if self.bits != 4 {
            return Err(QuantError::InvalidBits(self.bits));
        }
        Ok(QuantizedTensor {
            spec: FormatSpec::of(FormatKind::Int4),
            rows: self.rows,
            cols: self.cols,
            codes: pack_nibbles(&self.codes),
            block_scales: BlockScales::F32(vec![self.zero_point as f32; self.rows]),
            global_scale: self.scale as f32,
            source_dtype: SourceDtype::F64,
        })
    }
}

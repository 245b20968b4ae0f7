use ndarray::{Array2, ArrayView2};

use super::format::{FormatKind, FormatSpec};
use super::int::quantize_int;
use super::scale::{e4m3_decode, e4m3_encode, e8m0_decode, e8m0_encode, floor_log2, E4M3_MAX};
use super::{e2m1, nf4, QuantError};

/// Precision of the weights a tensor was quantized from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceDtype {
    F64,
    F32,
    /// Loaded from a container, which does not record the source precision.
    Unknown,
}

/// Stored block scales, in the encoding of the format.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockScales {
    E4m3(Vec<u8>),
    E8m0(Vec<u8>),
    F32(Vec<f32>),
}

impl BlockScales {
    pub fn len(&self) -> usize {
        match self {
            BlockScales::E4m3(v) | BlockScales::E8m0(v) => v.len(),
            BlockScales::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decoded value of scale `i`.
    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        match self {
            BlockScales::E4m3(v) => e4m3_decode(v[i]),
            BlockScales::E8m0(v) => e8m0_decode(v[i]),
            BlockScales::F32(v) => v[i] as f64,
        }
    }
}

/// A frozen 4-bit weight matrix: packed codes, block scales and a global scale.
///
/// Codes are row-major, two per byte, element `2i` in the low nibble. Rows
/// are never padded in storage; a trailing partial block simply has fewer
/// elements, which is equivalent to zero padding for absmax scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub spec: FormatSpec,
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<u8>,
    pub block_scales: BlockScales,
    /// `S_FP32` for NVFP4, the step size for INT4, `1.0` otherwise.
    pub global_scale: f32,
    pub source_dtype: SourceDtype,
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn padded_cols(&self) -> usize {
        self.spec.padded_cols(self.cols)
    }

    pub fn blocks_per_row(&self) -> usize {
        self.spec.blocks_per_row(self.cols)
    }

    #[inline]
    pub fn code(&self, row: usize, col: usize) -> u8 {
        unpack_at(&self.codes, row * self.cols + col)
    }

    /// Checks the structural invariants; used after deserialisation.
    pub fn validate(&self) -> Result<(), QuantError> {
        self.spec.validate()?;
        let n = self.rows * self.cols;
        if self.codes.len() != n.div_ceil(2) {
            return Err(QuantError::Corrupt(format!(
                "expected {} code bytes, found {}",
                n.div_ceil(2),
                self.codes.len()
            )));
        }
        let want = self.rows * self.blocks_per_row();
        if self.block_scales.len() != want {
            return Err(QuantError::Corrupt(format!(
                "expected {want} block scales, found {}",
                self.block_scales.len()
            )));
        }
        let scales_ok = match (&self.block_scales, self.spec.kind) {
            (BlockScales::E4m3(v), FormatKind::Nvfp4) => v.iter().all(|&b| b & 0x7F != 0x7F),
            (BlockScales::E8m0(v), FormatKind::Mxfp4) => v.iter().all(|&b| b != 0xFF),
            (BlockScales::F32(v), FormatKind::Int4 | FormatKind::Fp4 | FormatKind::Nf4) => {
                v.iter().all(|s| s.is_finite())
            }
            _ => false,
        };
        if !scales_ok || !self.global_scale.is_finite() {
            return Err(QuantError::Corrupt("invalid scale values".into()));
        }
        Ok(())
    }

    /// Reconstructs the dense matrix `Ŵ` in the original shape.
    pub fn dequantize(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.rows, self.cols));
        let bl = self.spec.block_len(self.cols);
        let bpr = self.blocks_per_row();
        let gs = self.global_scale as f64;
        let kind = self.spec.kind;
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            for b in 0..bpr {
                let s = self.block_scales.value(r * bpr + b);
                let start = b * bl;
                let end = (start + bl).min(self.cols);
                for (c, slot) in row[start..end].iter_mut().enumerate() {
                    let code = unpack_at(&self.codes, r * self.cols + start + c);
                    *slot = match kind {
                        FormatKind::Nvfp4 => gs * (s * e2m1::decode(code)),
                        FormatKind::Mxfp4 | FormatKind::Fp4 => s * e2m1::decode(code),
                        FormatKind::Nf4 => s * nf4::decode(code),
                        FormatKind::Int4 => gs * (code as f64 - s),
                    };
                }
            }
        }
        out
    }

    /// `x · Ŵᵀ` evaluated straight from the packed codes, one block scale at a
    /// time, without materialising `Ŵ`.
    pub fn matmul_transposed(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, QuantError> {
        if x.ncols() != self.cols {
            return Err(QuantError::ShapeMismatch {
                expected: self.cols,
                found: x.ncols(),
            });
        }
        let n = x.nrows();
        let mut out = Array2::<f64>::zeros((n, self.rows));
        let bl = self.spec.block_len(self.cols);
        let bpr = self.blocks_per_row();
        let gs = self.global_scale as f64;
        let mut decoded = vec![0.0f64; bl];
        for o in 0..self.rows {
            for b in 0..bpr {
                let s = self.block_scales.value(o * bpr + b);
                let start = b * bl;
                let end = (start + bl).min(self.cols);
                for (j, d) in decoded[..end - start].iter_mut().enumerate() {
                    let code = unpack_at(&self.codes, o * self.cols + start + j);
                    *d = match self.spec.kind {
                        FormatKind::Nvfp4 => s * e2m1::decode(code),
                        FormatKind::Mxfp4 | FormatKind::Fp4 => e2m1::decode(code),
                        FormatKind::Nf4 => nf4::decode(code),
                        FormatKind::Int4 => code as f64 - s,
                    };
                }
                let block_mul = match self.spec.kind {
                    FormatKind::Nvfp4 | FormatKind::Int4 => gs,
                    _ => s,
                };
                for i in 0..n {
                    let xr = x.row(i);
                    let mut acc = 0.0;
                    for (j, d) in decoded[..end - start].iter().enumerate() {
                        acc += xr[start + j] * d;
                    }
                    out[[i, o]] += block_mul * acc;
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn unpack_at(codes: &[u8], idx: usize) -> u8 {
    let byte = codes[idx / 2];
    if idx % 2 == 0 {
        byte & 0x0F
    } else {
        byte >> 4
    }
}

/// Packs 4-bit codes two per byte, low nibble first. An odd trailing code
/// leaves the high nibble zero.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|p| (p[0] & 0x0F) | (p.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn unpack_nibbles(packed: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| unpack_at(packed, i)).collect()
}

fn check_finite(w: &ArrayView2<f64>) -> Result<(), QuantError> {
    match w.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(QuantError::NonFinite { index }),
        None => Ok(()),
    }
}

fn absmax(vals: impl IntoIterator<Item = f64>) -> f64 {
    vals.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Per-block quantization driver: `scale_of(block)` picks the stored scale
/// and the divisor applied before `encode`.
fn quantize_blocked(
    w: &ArrayView2<f64>,
    spec: FormatSpec,
    mut scale_of: impl FnMut(f64) -> (f64, f64),
    encode: impl Fn(f64) -> u8,
    zero_code: u8,
) -> (Vec<u8>, Vec<f64>) {
    let (rows, cols) = w.dim();
    let bl = spec.block_len(cols);
    let bpr = spec.blocks_per_row(cols);
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * bpr);
    for row in w.rows() {
        for b in 0..bpr {
            let start = b * bl;
            let end = (start + bl).min(cols);
            let block = row.slice(ndarray::s![start..end]);
            let (stored, divisor) = scale_of(absmax(block.iter().copied()));
            scales.push(stored);
            if divisor == 0.0 {
                codes.extend(std::iter::repeat(zero_code).take(end - start));
            } else {
                codes.extend(block.iter().map(|&x| encode(x / divisor)));
            }
        }
    }
    (pack_nibbles(&codes), scales)
}

/// NVFP4: E2M1 codes, 16-element blocks with E4M3 scales, FP32 global scale
/// `S_FP32 = absmax(W) / (6·448)`.
pub fn quantize_nvfp4(w: ArrayView2<f64>) -> Result<QuantizedTensor, QuantError> {
    check_finite(&w)?;
    let spec = FormatSpec::of(FormatKind::Nvfp4);
    let (rows, cols) = w.dim();
    let mut global = (absmax(w.iter().copied()) / (e2m1::E2M1_MAX * E4M3_MAX)) as f32;
    if !global.is_finite() {
        return Err(QuantError::OutOfRange("global scale overflows f32".into()));
    }
    let all_zero = global == 0.0;
    if all_zero {
        global = 1.0;
    }
    let gs = global as f64;
    let mut bytes = Vec::new();
    let (codes, _) = quantize_blocked(
        &w,
        spec,
        |bmax| {
            let byte = if all_zero { 0 } else { e4m3_encode(bmax / (e2m1::E2M1_MAX * gs)) };
            bytes.push(byte);
            (0.0, gs * e4m3_decode(byte))
        },
        e2m1::encode,
        0,
    );
    Ok(QuantizedTensor {
        spec,
        rows,
        cols,
        codes,
        block_scales: BlockScales::E4m3(bytes),
        global_scale: global,
        source_dtype: SourceDtype::F64,
    })
}

/// MXFP4: E2M1 codes, 32-element blocks sharing a power-of-two scale
/// `2^(floor(log2(absmax)) - 2)`, where 2 is the largest E2M1 exponent.
pub fn quantize_mxfp4(w: ArrayView2<f64>) -> Result<QuantizedTensor, QuantError> {
    check_finite(&w)?;
    let spec = FormatSpec::of(FormatKind::Mxfp4);
    let (rows, cols) = w.dim();
    let mut bytes = Vec::new();
    let (codes, _) = quantize_blocked(
        &w,
        spec,
        |bmax| {
            let byte = if bmax == 0.0 { e8m0_encode(0) } else { e8m0_encode(mxfp4_exponent(bmax)) };
            bytes.push(byte);
            let scale = if bmax == 0.0 { 0.0 } else { e8m0_decode(byte) };
            (0.0, scale)
        },
        e2m1::encode,
        0,
    );
    Ok(QuantizedTensor {
        spec,
        rows,
        cols,
        codes,
        block_scales: BlockScales::E8m0(bytes),
        global_scale: 1.0,
        source_dtype: SourceDtype::F64,
    })
}

/// Shared block exponent for a nonzero block absmax.
pub fn mxfp4_exponent(bmax: f64) -> i32 {
    floor_log2(bmax) - 2
}

/// NF4: 64-element blocks, FP32 absmax scale, codebook lookup.
pub fn quantize_nf4(w: ArrayView2<f64>) -> Result<QuantizedTensor, QuantError> {
    check_finite(&w)?;
    per_block_f32(w, FormatSpec::of(FormatKind::Nf4), 1.0, nf4::encode, nf4::NF4_ZERO)
}

/// Plain FP4: E2M1 codes with one FP32 scale `absmax(row)/6` per row.
pub fn quantize_fp4(w: ArrayView2<f64>) -> Result<QuantizedTensor, QuantError> {
    check_finite(&w)?;
    per_block_f32(w, FormatSpec::of(FormatKind::Fp4), e2m1::E2M1_MAX, e2m1::encode, 0)
}

fn per_block_f32(
    w: ArrayView2<f64>,
    spec: FormatSpec,
    qmax: f64,
    encode: fn(f64) -> u8,
    zero_code: u8,
) -> Result<QuantizedTensor, QuantError> {
    let (rows, cols) = w.dim();
    let mut overflow = false;
    let (codes, scales) = quantize_blocked(
        &w,
        spec,
        |bmax| {
            let s = (bmax / qmax) as f32;
            if !s.is_finite() {
                overflow = true;
            }
            if s == 0.0 || !s.is_finite() {
                (1.0, 0.0)
            } else {
                (s as f64, s as f64)
            }
        },
        encode,
        zero_code,
    );
    if overflow {
        return Err(QuantError::OutOfRange("block scale overflows f32".into()));
    }
    Ok(QuantizedTensor {
        spec,
        rows,
        cols,
        codes,
        block_scales: BlockScales::F32(scales.into_iter().map(|s| s as f32).collect()),
        global_scale: 1.0,
        source_dtype: SourceDtype::F64,
    })
}

/// Quantizes `w` in the given format.
pub fn quantize(w: ArrayView2<f64>, kind: FormatKind) -> Result<QuantizedTensor, QuantError> {
    match kind {
        FormatKind::Nvfp4 => quantize_nvfp4(w),
        FormatKind::Mxfp4 => quantize_mxfp4(w),
        FormatKind::Nf4 => quantize_nf4(w),
        FormatKind::Fp4 => quantize_fp4(w),
        FormatKind::Int4 => quantize_int(w, 4)?.into_tensor(),
    }
}

/// `Δε = dequantize(quantize(W)) − W`.
pub fn quantization_noise(w: ArrayView2<f64>, kind: FormatKind) -> Result<Array2<f64>, QuantError> {
    let t = quantize(w, kind)?;
    Ok(t.dequantize() - &w)
}

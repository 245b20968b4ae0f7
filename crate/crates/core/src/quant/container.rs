//! Binary container for a single [`QuantizedTensor`]. Layout (little-endian):
//!
//! | offset | size | field                                     |
//! |--------|------|-------------------------------------------|
//! | 0      | 4    | magic `QERL`                              |
//! | 4      | 2    | version (u16, currently 1)                |
//! | 6      | 1    | format tag (u8)                           |
//! | 7      | 4    | rows (u32)                                |
//! | 11     | 4    | cols (u32)                                |
//! | 15     | 4    | global scale (f32)                        |
//! | 19     | n·w  | block scales, `w` = 1 (E4M3/E8M0) or 4    |
//! | …      | ⌈rc/2⌉ | packed codes                            |

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Read};

use super::format::{FormatKind, FormatSpec, ScaleKind};
use super::tensor::{BlockScales, QuantizedTensor, SourceDtype};
use super::QuantError;

pub const MAGIC: &[u8; 4] = b"QERL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 19;

impl QuantizedTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.write_u16::<LittleEndian>(VERSION).unwrap();
        out.write_u8(self.spec.kind.tag()).unwrap();
        out.write_u32::<LittleEndian>(self.rows as u32).unwrap();
        out.write_u32::<LittleEndian>(self.cols as u32).unwrap();
        out.write_f32::<LittleEndian>(self.global_scale).unwrap();
        match &self.block_scales {
            BlockScales::E4m3(b) | BlockScales::E8m0(b) => out.extend_from_slice(b),
            BlockScales::F32(v) => {
                for s in v {
                    out.write_f32::<LittleEndian>(*s).unwrap();
                }
            }
        }
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.block_scales.len() * self.spec.scale_kind.width() + self.codes.len()
    }

    /// Parses a container, rejecting trailing bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantError> {
        let mut cur = Cursor::new(bytes);
        let t = read_tensor(&mut cur)?;
        if cur.position() as usize != bytes.len() {
            return Err(QuantError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - cur.position() as usize
            )));
        }
        Ok(t)
    }
}

fn truncated(_: std::io::Error) -> QuantError {
    QuantError::Corrupt("truncated container".into())
}

/// Reads one container from a stream positioned at its magic.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<QuantizedTensor, QuantError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(QuantError::Corrupt("bad magic".into()));
    }
    let version = r.read_u16::<LittleEndian>().map_err(truncated)?;
    if version != VERSION {
        return Err(QuantError::Corrupt(format!("unsupported version {version}")));
    }
    let tag = r.read_u8().map_err(truncated)?;
    let kind = FormatKind::from_tag(tag)
        .ok_or_else(|| QuantError::Corrupt(format!("unknown format tag {tag}")))?;
    let spec = FormatSpec::of(kind);
    let rows = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let global_scale = r.read_f32::<LittleEndian>().map_err(truncated)?;
    let n_scales = rows
        .checked_mul(spec.blocks_per_row(cols))
        .ok_or_else(|| QuantError::Corrupt("shape overflow".into()))?;
    let n_codes = rows
        .checked_mul(cols)
        .ok_or_else(|| QuantError::Corrupt("shape overflow".into()))?
        .div_ceil(2);
    let block_scales = match spec.scale_kind {
        ScaleKind::E4m3PerBlockPlusFp32Global | ScaleKind::E8m0PerBlock => {
            let mut b = Vec::new();
            r.take(n_scales as u64).read_to_end(&mut b).map_err(truncated)?;
            if b.len() != n_scales {
                return Err(QuantError::Corrupt("truncated container".into()));
            }
            if kind == FormatKind::Nvfp4 {
                BlockScales::E4m3(b)
            } else {
                BlockScales::E8m0(b)
            }
        }
        ScaleKind::Fp32PerTensor | ScaleKind::Fp32PerBlock => {
            let mut v = Vec::with_capacity(n_scales.min(1 << 20));
            for _ in 0..n_scales {
                v.push(r.read_f32::<LittleEndian>().map_err(truncated)?);
            }
            BlockScales::F32(v)
        }
    };
    let mut codes = Vec::new();
    r.take(n_codes as u64).read_to_end(&mut codes).map_err(truncated)?;
    if codes.len() != n_codes {
        return Err(QuantError::Corrupt("truncated container".into()));
    }
    let t = QuantizedTensor {
        spec,
        rows,
        cols,
        codes,
        block_scales,
        global_scale,
        source_dtype: SourceDtype::Unknown,
    };
    t.validate()?;
    Ok(t)
}

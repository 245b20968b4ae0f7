use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::QuantError;

/// The 4-bit weight formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatKind {
    Int4,
    Fp4,
    Nvfp4,
    Mxfp4,
    Nf4,
}

impl FormatKind {
    pub const ALL: [FormatKind; 5] = [
        FormatKind::Int4,
        FormatKind::Fp4,
        FormatKind::Nvfp4,
        FormatKind::Mxfp4,
        FormatKind::Nf4,
    ];

    /// Byte tag used by the on-disk container.
    pub fn tag(self) -> u8 {
        match self {
            FormatKind::Int4 => 0,
            FormatKind::Fp4 => 1,
            FormatKind::Nvfp4 => 2,
            FormatKind::Mxfp4 => 3,
            FormatKind::Nf4 => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            FormatKind::Int4 => "int4",
            FormatKind::Fp4 => "fp4",
            FormatKind::Nvfp4 => "nvfp4",
            FormatKind::Mxfp4 => "mxfp4",
            FormatKind::Nf4 => "nf4",
        }
    }
}

impl fmt::Display for FormatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatKind {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "int4" => Ok(FormatKind::Int4),
            "fp4" | "fp4_e2m1" | "e2m1" => Ok(FormatKind::Fp4),
            "nvfp4" => Ok(FormatKind::Nvfp4),
            "mxfp4" => Ok(FormatKind::Mxfp4),
            "nf4" => Ok(FormatKind::Nf4),
            other => Err(QuantError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleKind {
    Fp32PerTensor,
    E4m3PerBlockPlusFp32Global,
    E8m0PerBlock,
    Fp32PerBlock,
}

impl ScaleKind {
    /// Bytes per stored block scale.
    pub fn width(self) -> usize {
        match self {
            ScaleKind::E4m3PerBlockPlusFp32Global | ScaleKind::E8m0PerBlock => 1,
            ScaleKind::Fp32PerTensor | ScaleKind::Fp32PerBlock => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSize {
    Fixed(usize),
    /// One block spans the whole row.
    Row,
}

/// Block geometry and scale encoding of a format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FormatSpec {
    pub kind: FormatKind,
    pub block_size: BlockSize,
    pub scale_kind: ScaleKind,
}

impl FormatSpec {
    pub const fn of(kind: FormatKind) -> Self {
        let (block_size, scale_kind) = match kind {
            FormatKind::Int4 => (BlockSize::Row, ScaleKind::Fp32PerTensor),
            FormatKind::Fp4 => (BlockSize::Row, ScaleKind::Fp32PerBlock),
            FormatKind::Nvfp4 => (BlockSize::Fixed(16), ScaleKind::E4m3PerBlockPlusFp32Global),
            FormatKind::Mxfp4 => (BlockSize::Fixed(32), ScaleKind::E8m0PerBlock),
            FormatKind::Nf4 => (BlockSize::Fixed(64), ScaleKind::Fp32PerBlock),
        };
        FormatSpec { kind, block_size, scale_kind }
    }

    /// Checks the per-kind invariants; hand-built specs must match [`FormatSpec::of`].
    pub fn validate(&self) -> Result<(), QuantError> {
        if let BlockSize::Fixed(0) = self.block_size {
            return Err(QuantError::InvalidSpec("block size must be positive".into()));
        }
        if *self != FormatSpec::of(self.kind) {
            return Err(QuantError::InvalidSpec(format!(
                "{} requires {:?} blocks with {:?} scales",
                self.kind,
                FormatSpec::of(self.kind).block_size,
                FormatSpec::of(self.kind).scale_kind
            )));
        }
        Ok(())
    }

    /// Elements per block for a row of `cols` elements.
    pub fn block_len(&self, cols: usize) -> usize {
        match self.block_size {
            BlockSize::Fixed(n) => n,
            BlockSize::Row => cols.max(1),
        }
    }

    pub fn blocks_per_row(&self, cols: usize) -> usize {
        cols.div_ceil(self.block_len(cols))
    }

    /// Row length after zero padding up to a whole number of blocks.
    pub fn padded_cols(&self, cols: usize) -> usize {
        self.blocks_per_row(cols) * self.block_len(cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_specs() {
        let nv = FormatSpec::of(FormatKind::Nvfp4);
        assert_eq!(nv.block_size, BlockSize::Fixed(16));
        assert_eq!(nv.scale_kind, ScaleKind::E4m3PerBlockPlusFp32Global);
        let mx = FormatSpec::of(FormatKind::Mxfp4);
        assert_eq!(mx.block_size, BlockSize::Fixed(32));
        assert_eq!(mx.scale_kind, ScaleKind::E8m0PerBlock);
        assert_eq!(FormatSpec::of(FormatKind::Nf4).block_len(100), 64);
        assert_eq!(FormatSpec::of(FormatKind::Int4).block_len(100), 100);
        for k in FormatKind::ALL {
            FormatSpec::of(k).validate().unwrap();
            assert_eq!(FormatKind::from_tag(k.tag()), Some(k));
            assert_eq!(k.name().parse::<FormatKind>().unwrap(), k);
        }
    }

    #[test]
    fn mismatched_spec_rejected() {
        let bad = FormatSpec {
            kind: FormatKind::Nvfp4,
            block_size: BlockSize::Fixed(32),
            scale_kind: ScaleKind::E4m3PerBlockPlusFp32Global,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn padding() {
        let nv = FormatSpec::of(FormatKind::Nvfp4);
        assert_eq!(nv.blocks_per_row(40), 3);
        assert_eq!(nv.padded_cols(40), 48);
        assert_eq!(nv.padded_cols(48), 48);
    }
}

//! 4-bit weight codecs: INT4, plain FP4 (E2M1), NVFP4, MXFP4 and NF4.
//!
//! All codecs are pure functions of their input. Scales are chosen by block
//! absmax; see [`quantize_nvfp4`], [`quantize_mxfp4`] and [`quantize_nf4`]
//! for the exact rules.

mod container;
pub mod e2m1;
mod format;
mod int;
pub mod nf4;
mod report;
pub mod scale;
mod tensor;

pub use container::{read_tensor, HEADER_LEN, MAGIC, VERSION};
pub use format::{BlockSize, FormatKind, FormatSpec, ScaleKind};
pub use int::{quantize_int, IntQuantized};
pub use report::{error_report, ErrorReport};
pub use tensor::{
    mxfp4_exponent, pack_nibbles, quantization_noise, quantize, quantize_fp4, quantize_mxfp4,
    quantize_nf4, quantize_nvfp4, unpack_nibbles, BlockScales, QuantizedTensor, SourceDtype,
};

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("non-finite weight at flat index {index}")]
    NonFinite { index: usize },
    #[error("unsupported bit width {0} (expected 2..=8, packing needs 4)")]
    InvalidBits(u32),
    #[error("unknown format `{0}`")]
    UnknownFormat(String),
    #[error("invalid format spec: {0}")]
    InvalidSpec(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("input has {found} columns, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

//! Desk-scale numerics for low-rank adapters.
//!
//! Dense row-major matrices, the merged update `W0 + (alpha/r) B A`, the
//! unmerged two-path forward pass, trainable-parameter accounting, a 4-bit
//! symmetric block quantizer and the mean token accuracy metric. Everything
//! is plain `f64` with naive kernels; sizes are meant to stay in the low
//! thousands.

pub mod adapter;
pub mod matrix;
pub mod metrics;
pub mod quant;
pub mod verify;

pub use adapter::{forward_two_path, merge_adapter, trainable_param_count, AdapterPair, ParamCount};
pub use matrix::Matrix;
pub use metrics::{mean_token_accuracy, TokenStream};
pub use quant::{quantize_dequantize_4bit, BlockQuantized, QuantSpec};
pub use verify::{verify, PropertyCheck, VerifyConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoraError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("prediction and reference masks differ")]
    MaskMismatch,
    #[error("matrix text: {0}")]
    Parse(String),
}

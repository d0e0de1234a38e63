//! Double-precision neural-network kernels with hand-written backward
//! passes, the ST-LSTM / PilotNet / J-Net stacks built from them, and the
//! frame ingestion pipeline that feeds them.

// Index loops mirror the tensor formulas in the kernels.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod container;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod ops;
mod tensor;

pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

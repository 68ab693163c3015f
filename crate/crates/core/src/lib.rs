//! Fixed-point matrix multiplication with the free-pipeline fast inner
//! product (FFIP) and its predecessor FIP, next to the conventional baseline.
//!
//! - [`gemm`]: reference kernels with operation counting.
//! - [`quant`]: fixed-point formats, zero points, β folding and weight prep.
//! - [`sim`]: clocked systolic-array simulator for all three datapaths.
//! - [`tiler`]: convolution-to-GEMM address generation.
//! - [`cost`]: register, throughput and efficiency estimates.

pub mod cost;
pub mod error;
pub mod gemm;
pub mod matrix;
pub mod quant;
pub mod sim;
pub mod tiler;

pub use error::{Error, Result};
pub use gemm::{gemm, OpCounter, Variant};
pub use matrix::{IntFormat, QMatrix};
pub use quant::{PreparedWeights, QuantSpec};

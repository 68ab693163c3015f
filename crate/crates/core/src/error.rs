use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("inner dimension K = {0} is odd; fast inner products pair up K and need it even")]
    OddK(usize),

    #[error("{what}: value {value} does not fit {bits}-bit {} range", if *.signed { "signed" } else { "unsigned" })]
    WidthOverflow {
        what: &'static str,
        value: i64,
        bits: u32,
        signed: bool,
    },

    #[error("arithmetic overflow of the 64-bit working domain in {0}")]
    Overflow(&'static str),

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("run too short for a steady-state measurement: {fill_drain} of {total} cycles are fill/drain")]
    InsufficientRun { fill_drain: u64, total: u64 },

    #[error("tiling plan infeasible: {0}")]
    Plan(String),
}

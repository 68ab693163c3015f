//! Experiment harness over `ffip-core`: verification suites, simulator runs,
//! tiler checks and cost reports driven by a TOML configuration.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_bench, cmd_cost_report, cmd_simulate, cmd_tile_check, cmd_verify, Outcome};
pub use config::RunConfig;

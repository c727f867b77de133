//! Experiment harness: configuration, the (strategy x holdout x seed) grid
//! runner, run records, and report aggregation. The `debias-dg` binary is a
//! thin CLI over this library.

pub mod config;
pub mod record;
pub mod report;
pub mod runner;

pub use config::{C2stParams, DataConfig, ExperimentConfig, LodoPlan, TrainParams};
pub use record::{BiasHeadScores, RunRecord};
pub use report::{aggregate, collect_records, write_summary, Summary};
pub use runner::{cell_dir, enumerate_cells, run_cell, run_grid, Cell};

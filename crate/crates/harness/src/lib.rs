//! Training, evaluation, robustness experiments, the pooling benchmark and
//! report output for the BEV models. The `lss` binary is a thin
//! CLI over this library.

pub mod bench;
pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod report;
pub mod train;

//! IO, configuration and orchestration around `oiad-core`: dataset loaders
//! and splits, binary checkpoints, the experiment pipeline, reports and the
//! command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod gallery;
pub mod pipeline;
pub mod report;

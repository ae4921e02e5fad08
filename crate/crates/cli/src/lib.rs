//! Resumable run directories for the shortcut lab: config, checkpoints,
//! manifest and the staged pipeline behind the `shortcut-lab` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;

//! Library half of the command-line tool: the run configuration document
//! and the checkpoint file format. The binary in `main.rs` is a thin
//! dispatcher over these and the core crate.

pub mod checkpoint;
pub mod config;

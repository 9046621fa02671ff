//! Config parsing and experiment running behind the `mose` binary.

pub mod config;
pub mod runner;

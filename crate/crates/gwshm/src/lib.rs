//! Std companion of `gwshm-core`: scenario files, waveform and matrix IO, report exports and
//! the `gwshm` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod io;
pub mod pipelines;

pub use gwshm_core as core;

//! Std companion to `gotune-core`: file formats, parallel corpus mining,
//! checkpoints, the pipeline driver, a synthetic benchmark generator and the
//! `gotune` command line.

pub mod checkpoint;
pub mod cli;
pub mod digest;
pub mod error;
pub mod formats;
pub mod mining;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};

//! Core of the go-tuning pipeline.
//!
//! Everything here is pure computation over in-memory values: tokenization and
//! task templates, the label-space datastore with exact dot-product retrieval,
//! the corpus mining kernels, KDE label weights with their constraint objective,
//! a small masked-LM with analytic gradients, the SDA / bi-level trainers and
//! zero-shot evaluation. File IO, parallel drivers and the CLI live in the
//! `gotune` crate.
#![no_std]
#![deny(unused_must_use, rust_2018_idioms)]

extern crate alloc;

pub mod datastore;
pub mod error;
pub mod evaluator;
pub mod example;
pub mod geometry;
pub mod miner;
pub mod model;
pub mod rng;
pub mod task;
pub mod tokenize;
pub mod trainer;

pub use datastore::{LabelDatastore, NeighborEntry, NeighborSet, RetrievalCache, Similarity};
pub use error::{Error, Result};
pub use evaluator::{evaluate, predict, Prediction};
pub use example::{EvalExample, MinedExample, Report, ReportRow, Source};
pub use geometry::GeometricWeights;
pub use miner::{MiningConfig, MiningStats, CapPolicy};
pub use model::{ModelParams, Mlm, Shape};
pub use task::{Placeholder, TaskSpec};
pub use tokenize::{tokenize, MASK_TOKEN, OOV_TOKEN};
pub use trainer::{merge_tasks, train_go, train_sda, Mode, TrainConfig, TrainState};

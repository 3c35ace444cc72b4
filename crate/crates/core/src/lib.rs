//! Adapter-pool routing for long-tailed class-incremental learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense tensors, a reverse-mode tape, AdamW and the cosine schedule.
//! - [`backbone`]: a small frozen vision transformer with per-block bottleneck adapters.
//! - [`routing`]: adapter pools with key retrieval, the assigner and the combined loss.
//! - [`stream`]: long-tailed task streams, CIFAR-100 binary ingestion and synthetic data.
//! - [`trainer`]: the per-task training loop, ensemble inference and experiment driver.
//! - [`eval`]: accuracy, subgroup and memory accounting.
//! - [`checkpoint`]: the per-task parameter container.

pub mod backbone;
pub mod checkpoint;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod real;
pub mod routing;
pub mod seed;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;

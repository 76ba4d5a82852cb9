//! Adaptive local-then-global token merging for plain ViT encoders.
//!
//! A small dense kernel ([`numkernel`]) backs a pre-norm ViT encoder
//! ([`vit`]) with two merge sites ([`merge`]): windowed average pooling in an
//! early layer and bipartite matching in a later one. [`calibrate`] derives
//! the similarity thresholds, [`analysis`] measures intra/inter-class token
//! similarity, and [`cost`] counts MACs, times forward passes and sweeps
//! thresholds.
//!
//! With the default `parallel` feature, work is spread over the current
//! rayon pool; without it (or inside a one-thread pool) everything runs
//! sequentially and produces identical bits.

pub mod analysis;
pub mod calibrate;
pub mod cost;
pub mod error;
pub mod exec;
pub mod merge;
pub mod numkernel;
pub mod vit;

pub use error::{AlgmError, Result, WeightError};
pub use numkernel::{Matrix, Rng};

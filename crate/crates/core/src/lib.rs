//! Dual temporal memory video object segmentation at desk scale.
//!
//! The crate is organised by sub-network:
//!
//! * [`numerics`]: tensors, reverse-mode gradients, Adam.
//! * [`stgraph`]: short-term memory, a windowed spatial-temporal graph over
//!   the last `k` frames plus the query frame, filtered by a normalized
//!   graph convolution and trained with a semi-supervised node loss.
//! * [`longmem`]: long-term memory, a single-gate recurrent state fed by
//!   masked global average pooling.
//! * [`segnet`]: toy encoder, attention, fusion, skip-connected decoder and
//!   the supervised and total losses.
//! * [`data`] and [`metrics`]: NetPBM I/O, the synthetic moving-shapes
//!   generator, and J / F / J&F evaluation.
//! * [`config`], [`checkpoint`], [`train`]: configuration files, parameter
//!   checkpoints, and the training / inference loops used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod longmem;
pub mod mask;
pub mod metrics;
pub mod numerics;
pub mod segnet;
pub mod stgraph;
pub mod train;

pub use error::{Error, Result};

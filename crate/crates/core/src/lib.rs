//! Hierarchical spatio-temporal feature learning for dynamic point cloud
//! prediction.
//!
//! A recurrent, multi-level network consumes one frame at a time, extracts
//! features at progressively coarser resolutions, propagates them back to
//! full resolution and predicts a per-point motion field that moves the
//! current frame onto the next one. Besides the network itself the crate
//! carries the losses and metrics used to train and evaluate it, a
//! synthetic articulated-motion generator, and tools that split the
//! predicted motion into per-level contributions.

// `!(x > 0.0)` is used on purpose to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod cell;
pub mod data;
pub mod network;
pub mod training;
pub mod analysis;

pub use error::{Error, Result};

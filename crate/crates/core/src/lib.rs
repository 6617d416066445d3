//! Robust classification under class imbalance and label noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`prob`]: probability/logit vectors, softmax, argmax, clamped log.
//! - [`losses`]: CE, class-balanced CE, reverse CE and their symmetric
//!   combinations, with analytic logit gradients.
//! - [`data`]: synthetic long-tailed, noisily labelled image datasets and
//!   their binary file format.
//! - [`trainer`]: a small softmax classifier trained by plain SGD with a
//!   reduce-on-plateau learning rate, plus checkpoints.
//! - [`tta`]: bilinear resize, center crop and multi-scale test-time
//!   augmentation.
//! - [`ensemble`]: top-1 error, top-1 voting and the sweep harnesses.
//! - [`report`]: CSV / plain-text rendering of sweep results.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod losses;
pub mod prob;
pub mod report;
pub mod trainer;
pub mod tta;

pub use error::{Error, Result};

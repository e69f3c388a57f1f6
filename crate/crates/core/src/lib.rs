//! Dual-path multi-scale deraining transformer.
//!
//! A backbone encoder-decoder restores a rainy image through a global
//! residual. Two branches feed it: a hierarchical multi-patch path and a
//! coarse-to-fine Gaussian-pyramid path, whose image estimates are summed
//! into the backbone input and supervised alongside the final output.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod image_ops;
pub mod inference;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};

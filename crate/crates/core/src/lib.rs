//! Multi-class anomaly detection and localization with a regularized,
//! class-aware coupled-hypersphere feature adaptation model.
//!
//! The pipeline: a frozen [`backbone`] produces patch features, a trainable
//! [`descriptor`] maps them to target-oriented features, a [`discriminator`]
//! predicts a per-patch Gaussian, and a [`memory_bank`] of per-class,
//! per-location means serves as the reference for [`scorer`].

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod descriptor;
pub mod discriminator;
pub mod error;
pub mod evaluator;
pub mod imaging;
pub mod losses;
pub mod memory_bank;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod resnet;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};

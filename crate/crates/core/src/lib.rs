//! Cross-channel adversarial anomaly detection for video.
//!
//! Two conditional GANs are trained on normal footage only: one translates
//! frames into optical flow, the other flow into frames. At test time only
//! their patch discriminators are used; low patch realness in either channel
//! marks abnormal regions.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod render;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

//! Recurrent filter learning tracker: a convolutional LSTM watches target
//! exemplars and emits the correlation filter used to localize the target in
//! search images. The crate covers the networks, desk-scale training, online
//! tracking, synthetic data generation, and one-pass evaluation.

pub mod backbone;
pub mod data;
pub mod error;
pub mod evalbench;
pub mod filtergen;
pub mod geometry;
pub mod image;
pub mod model;
pub mod nn;
pub mod response;
pub mod rng;
pub mod supervision;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};

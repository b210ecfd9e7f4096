//! Verification toolkit for machine unlearning.
//!
//! The crate trains small dense models on synthetic data, removes a forget
//! set with one of several unlearning baselines, and then probes the result
//! with the unlearning mapping attack: a projected-gradient search for inputs
//! that make the unlearned model reproduce the original model's outputs on
//! forgotten samples. Metrics and the robust-unlearning verdict live in
//! [`verify`]; test-time purification and the adaptive attack against it in
//! [`purify`].

pub mod attack;
pub mod data;
pub mod digest;
pub mod error;
pub mod graph;
pub mod model;
pub mod purify;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod unlearn;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

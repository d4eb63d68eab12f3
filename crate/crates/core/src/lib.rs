//! GroupFormer: clustered spatial-temporal transformer for group activity
//! recognition, with a from-scratch tensor/autodiff engine, a seeded
//! synthetic multi-agent task, and the training and ablation machinery.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod autodiff;
pub mod clustering;
pub mod config;
pub mod cstt;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod grg;
pub mod heads;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

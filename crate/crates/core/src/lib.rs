//! Frequency-domain sequential recommendation with slide filters.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod mixer;
pub mod objectives;
pub mod pipeline;
pub mod scalar;
pub mod spectral;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{BinRatio, Scalar};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type ModelParams64 = encoder::ModelParams<f64>;
pub type ModelParams32 = encoder::ModelParams<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;

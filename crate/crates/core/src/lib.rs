//! Text-to-motion generation with a semantically aligned motion autoencoder,
//! a masked auto-regressive transformer with rectified-flow heads, and the
//! usual text-motion evaluation metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! bottom of this file name the concrete instantiations used by the CLI.

pub mod autoencoder;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod motion_data;
pub mod nn;
pub mod sampler;
pub mod text_encoding;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type MotionSequence32 = motion_data::MotionSequence<f32>;
pub type MotionSequence64 = motion_data::MotionSequence<f64>;
pub type Autoencoder32 = autoencoder::Autoencoder<f32>;
pub type Autoencoder64 = autoencoder::Autoencoder<f64>;
pub type Generator32 = generator::Generator<f32>;
pub type Generator64 = generator::Generator<f64>;
pub type Evaluator32 = evaluation::Evaluator<f32>;
pub type Evaluator64 = evaluation::Evaluator<f64>;

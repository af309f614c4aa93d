//! Domain-generalizing multimodal sentiment regression at desk scale.
//!
//! The stack: an entropy-based disentangler splits each modality's features
//! into in-domain and out-of-domain codes; a mixture of invariant experts is
//! trained adversarially through a gradient-reversal layer on the in-domain
//! side; a gated cross-modal adapter injects knowledge across modalities on
//! the out-of-domain side. Everything runs on the in-crate reverse-mode
//! autodiff engine and is generic over the scalar type: `f32` for training,
//! `f64` for gradient checking.

pub mod adapter;
pub mod autodiff;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod moie;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tape.
pub type Tape32 = autodiff::Tape<f32>;
/// Gradient-checking-precision tape.
pub type Tape64 = autodiff::Tape<f64>;
/// Training-precision model.
pub type Model32 = pipeline::MidgModel<f32>;
/// Gradient-checking-precision model.
pub type Model64 = pipeline::MidgModel<f64>;
/// Training-precision dataset.
pub type Dataset32 = data::Dataset<f32>;

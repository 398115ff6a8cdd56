//! Skip-modal generation lab.
//!
//! Trains one model on two disjoint paired corpora — (image, text) and
//! (text, audio) — with text as the shared modality, then generates audio
//! directly from images even though no paired image–audio data exists.
//! Everything runs at desk scale on synthetic data with an exactly
//! invertible audio code, so cross-modal transfer is measurable without
//! external models.
//!
//! The crate is generic over the floating-point scalar (`f32` for training
//! speed, `f64` for gradient checking); see the aliases at the crate root.

pub mod checkpoint;
pub mod codecs;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod mib;
pub mod model;
pub mod params;
pub mod plot;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Single-precision tensor, the training default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by gradient checks.
pub type Tensor64 = Tensor<f64>;

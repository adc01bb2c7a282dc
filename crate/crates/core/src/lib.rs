//! Cross-modality alignment toolkit: transport-weighted distribution
//! alignment (CM-EMD), variance-ratio discrimination learning (CM-DL), and a
//! multi-granularity feature structure, exercised end to end on a toy
//! two-stream encoder over synthetic two-modality data.
//!
//! The numeric core is generic over the scalar type (`f32`/`f64`) through
//! [`Real`]; the shipped training pipeline and CLI run everything in `f64`.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod mgs;
pub mod model;
pub mod ot;
pub mod real;
pub mod trainer;

pub use batch::{LabeledBatch, Modality};
pub use error::{Error, Result};
pub use real::Real;

/// Scalar type used by the shipped pipeline.
pub type Scalar = f64;

/// N×D embedding matrix, one row per sample.
pub type FeatureMatrix<T = Scalar> = ndarray::Array2<T>;

/// Concrete aliases for the two supported scalar widths.
pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type FeatureMatrix64 = FeatureMatrix<f64>;

//! Open-vocabulary temporal action detection over pre-extracted video
//! features: a multi-scale transformer pyramid with boundary-regression and
//! actionness heads, contrastive video-text alignment, Soft-NMS
//! postprocessing, and tIoU/mAP evaluation.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! `*64` aliases below pin the `f64` instantiation used by the pipeline.

pub mod align;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod model;
pub mod optim;
pub mod postprocess;
pub mod scalar;
pub mod splits;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

// Concrete f64-backed aliases for the main types.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type FeatureSequence64 = encoder::FeatureSequence<f64>;
pub type Pyramid64 = encoder::Pyramid<f64>;
pub type TextEmbeddingSet64 = align::TextEmbeddingSet<f64>;
pub type Segment64 = postprocess::Segment<f64>;
pub type AdamW64 = optim::AdamW<f64>;

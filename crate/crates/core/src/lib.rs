//! Multi-teacher knowledge distillation for compact medical vision-language
//! encoders, with synthetic data, evaluation and survival analysis.

pub mod alignment;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod survival;
pub mod synth;
pub mod teacher_select;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    Batch, Embedding, ImageTextPair, KdWeights, Quadruplet, SampleId, TeacherId, Temperature,
};

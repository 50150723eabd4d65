//! Normalized and geometry-aware self-attention in a small encoder–decoder
//! captioning model, with hand-written backward passes certified against
//! central finite differences.

pub mod attention;
pub mod data;
mod error;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod parallel;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{GradBuffer, Init, ParamId, ParamStore, Parameter, RngState};
pub use tensor::Tensor;

//! Few-shot semantic segmentation by meta-learning.
//!
//! A two-branch convolutional embedding maps every pixel of the support and
//! query images of an episode to a feature vector. A ridge-regression base
//! learner is solved in closed form on the support pixels and its prediction
//! on the query pixels is scored with a pixel-wise cross-entropy. Because the
//! solve is differentiable, the embedding and the head scalars are trained
//! end to end across episodes.

pub mod autodiff;
pub mod config;
pub mod embed;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod optim;
pub mod ridge;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};

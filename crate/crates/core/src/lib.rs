//! Neuro-symbolic generative model of stroke-based drawings.
//!
//! Images are explained as sequences of Bezier strokes placed by affine
//! layouts and rendered through a differentiable rasteriser. The crate
//! contains the autodiff engine everything is built on, the generative and
//! recognition networks, amortised variational training with mixed
//! reparameterised / score-function gradients, evaluation metrics and the
//! type-token tasks (exemplar generation, completion, one-shot
//! classification).
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the precision for common uses.

pub mod affine;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod renderer;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;
pub use tensor::{Graph, ParamStore, Tensor, TensorError};

/// Single precision model, used for training and the command line tools.
pub type Model32 = model::DoodModel<f32>;
/// Double precision model, used by gradient verification.
pub type Model64 = model::DoodModel<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Trainer32 = training::Trainer<f32>;

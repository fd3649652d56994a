//! Differentiable function approximators: a reverse-mode tape, the diffusion
//! and value networks built on it, Adam, and parameter array storage.

pub mod adam;
pub mod checkpoint;
pub mod models;
pub mod params;
pub mod tape;

pub use adam::Adam;
pub use models::{step_embedding, DiffusionNet, DiffusionNetConfig, ValueNet, ValueNetConfig};
pub use params::{Block, BoundParams, ParamSet};
pub use tape::{ConvGeometry, Gradients, Tape, Tensor, Var};

//! Reverse-mode tensor engine: a define-by-run tape over f64 tensors, the
//! layers the networks are built from, SGD with a cyclic schedule and the
//! checkpoint encoding.
//!
//! Tensors are row-major `(batch, channel, [depth,] height, width)`.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{Conv, ConvBlock, LayerSpec, Layout, Linear, Mode, Norm, NormSpec, ResidualBlock};
pub use optim::{CyclicLr, Sgd, TrainConfig};
pub use params::{GradStore, ParamId, Params};
pub use tape::{NodeId, NormKind, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

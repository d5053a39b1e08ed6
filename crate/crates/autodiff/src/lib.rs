//! Reverse-mode automatic differentiation for small dense and convolutional
//! networks: a tape ([`Graph`]), the layer set used by the agents, Adam, and
//! a finite-difference checker.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use error::AutodiffError;
pub use graph::{Gradients, Graph, Normalization, Var};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, Linear, Module, Param, ParamId, StateMap};
pub use optim::Adam;
pub use tensor::{Real, Tensor};

//! CartPole dynamics and pixel observations.

mod cartpole;
mod render;

pub use cartpole::*;
pub use render::*;

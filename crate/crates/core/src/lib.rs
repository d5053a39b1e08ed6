//! Deep active inference and DQN agents on a pixel-rendered CartPole,
//! with the experiment harness that produces their learning curves.

pub mod agent_daif;
pub mod agent_dqn;
pub mod env;
pub mod error;
pub mod harness;
pub mod networks;
pub mod numerics;
pub mod pretrain;
pub mod replay;

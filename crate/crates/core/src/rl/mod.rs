//! From-scratch DDPG for the voltage-control loop.

mod buffer;
mod ddpg;
mod net;
mod optim;

pub use ddpg::{
    actor_gradient, actor_update, critic_update, fmt_float, train, write_training_log, ActionValue, Actor, ActorKind,
    AgentScope, CriticSample, EpisodeLog, FnCritic, MlpPolicy, TrainConfig, TrainOutcome, TrainedPolicy, Trainer,
    INPUT_SCALE, PROTOCOL_DT,
};
pub use buffer::{ReplayBuffer, Transition};
pub use net::{net_backprop, net_eval, soft_update, BatchCache, FeedForwardNet, ForwardCache};
pub use optim::{Optimizer, OptimizerKind};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("replay buffer holds {len} transitions, batch needs {batch}")]
    BufferTooSmall { len: usize, batch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
}

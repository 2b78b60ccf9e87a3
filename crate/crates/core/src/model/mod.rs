//! Causal-transformer bidding policy with a value head and an expert
//! exploration head.

mod batch;
mod config;
mod losses;
pub mod moe;
mod network;
mod value;

pub use batch::{Normalizer, TokenBatch, TokenInput};
pub use config::{ModelConfig, MoeConfig};
pub use losses::{
    balance_loss_node, diversity_loss_node, policy_loss, value_loss, weighted_mse,
};
pub use moe::{CandidateActionSet, RoutingDecision};
pub use network::{ForwardNodes, ForwardOptions, GradModel, MoeNodes};
pub use value::{cost_penalty, dynamic_target, target_mean, TemporalFactor, ValueContext};

#[cfg(test)]
mod tests;

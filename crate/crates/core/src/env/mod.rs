//! Repeated second-price auction environment with a hard budget and a soft
//! CPC constraint.

mod episode;
mod features;
mod trajectory;
mod types;

pub use episode::{
    compute_bid, run_episode, run_step, sample_episode_opportunities, BiddingPolicy,
    ConstantPolicy, EpisodeResult, StepOutcome,
};
pub use features::{featurize_state, FeatureContext, StepAggregate, RECENT_WINDOW};
pub use trajectory::{
    compute_discounted_rtg, compute_rtg, read_trajectories, write_trajectories, EpisodeSummary,
    Trajectory, TrajectoryStep,
};
pub use types::{
    AuctionOutcome, BudgetLedger, Distribution, EpisodeConfig, ImpressionOpportunity, StepState,
    PRICE_RESOLUTION, STATE_DIM,
};

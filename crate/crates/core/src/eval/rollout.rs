use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{run_episode, BiddingPolicy, EpisodeConfig, EpisodeResult, StepState, TrajectoryStep};
use crate::error::Result;
use crate::model::{GradModel, Normalizer, TokenInput};
use crate::rng::{self, mix_seed, streams};

/// Which action a rollout executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// The policy head's action.
    #[default]
    Exploit,
    /// The expert head's aggregate exploratory action.
    Explore,
}

/// Return-conditioned rollout policy: the return-to-go starts at
/// `target_return` and is decremented by every realized reward.
pub struct ModelPolicy<'a> {
    pub model: &'a GradModel,
    pub normalizer: &'a Normalizer,
    pub target_return: f64,
    pub mode: ActionMode,
    rng: ChaCha8Rng,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(
        model: &'a GradModel,
        normalizer: &'a Normalizer,
        target_return: f64,
        mode: ActionMode,
        seed: u64,
    ) -> Self {
        Self {
            model,
            normalizer,
            target_return,
            mode,
            rng: rng::stream(seed, streams::EXPLORATION),
        }
    }

    /// The model input for the current step given the completed ones.
    pub fn window(&self, state: &StepState, history: &[TrajectoryStep]) -> Vec<TokenInput> {
        let t = history.len();
        let start = (t + 1).saturating_sub(self.model.config.seq_len);
        let mut rtg = self.target_return;
        let mut window = Vec::with_capacity(t + 1 - start);
        for (k, step) in history.iter().enumerate() {
            if k >= start {
                window.push(TokenInput {
                    rtg,
                    state: step.state,
                    prev_action: if k == 0 { 0.0 } else { history[k - 1].action },
                });
            }
            rtg -= step.reward;
        }
        window.push(TokenInput {
            rtg,
            state: state.features,
            prev_action: history.last().map_or(0.0, |s| s.action),
        });
        window
    }
}

impl BiddingPolicy for ModelPolicy<'_> {
    fn act(&mut self, state: &StepState, history: &[TrajectoryStep]) -> Result<f64> {
        let window = self.window(state, history);
        match self.mode {
            ActionMode::Exploit => self.model.predict(&window, self.normalizer),
            ActionMode::Explore => self.model.explore(&window, self.normalizer, &mut self.rng),
        }
    }
}

/// Seed of the `i`-th evaluation episode for evaluation seed `seed`.
pub fn eval_episode_seed(seed: u64, i: usize) -> u64 {
    mix_seed(mix_seed(seed, streams::EVALUATION), i as u64)
}

/// Rolls out one episode of `config` with the model.
pub fn rollout(
    model: &GradModel,
    normalizer: &Normalizer,
    target_return: f64,
    mode: ActionMode,
    config: &EpisodeConfig,
) -> Result<EpisodeResult> {
    let mut policy = ModelPolicy::new(model, normalizer, target_return, mode, config.seed);
    run_episode(&mut policy, config)
}

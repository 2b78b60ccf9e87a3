use rand::Rng;

use super::config::TrainConfig;
use crate::env::{compute_discounted_rtg, compute_rtg, Trajectory};
use crate::error::{GradError, Result};
use crate::model::{dynamic_target, ModelConfig, Normalizer, TokenBatch, TokenInput, ValueContext};
use crate::rng::{self, mix_seed, streams};

/// Logged trajectories with the statistics and returns-to-go used for
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub normalizer: Normalizer,
    /// Training returns-to-go per trajectory (discounted if configured).
    pub rtg: Vec<Vec<f64>>,
    pub discount: Option<f64>,
}

impl TrajectoryDataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(GradError::Empty("trajectory dataset"));
        }
        let horizon = trajectories[0].steps.len();
        for t in &trajectories {
            if t.steps.is_empty() || t.steps.len() != horizon {
                return Err(GradError::InvalidConfig(format!(
                    "episode {} has {} steps, expected {horizon}",
                    t.episode_id,
                    t.steps.len()
                )));
            }
            if !t.rtg_telescopes() {
                return Err(GradError::InvalidConfig(format!(
                    "episode {} returns-to-go do not telescope",
                    t.episode_id
                )));
            }
        }
        let discount = train.discounted_rtg.then_some(train.discount);
        let rtg = trajectories
            .iter()
            .map(|t| match discount {
                Some(d) => compute_discounted_rtg(&t.rewards(), d),
                None => compute_rtg(&t.rewards()),
            })
            .collect();
        let normalizer = Normalizer::fit(&trajectories, model.rtg_scale, model.action_scale)?;
        Ok(Self {
            trajectories,
            normalizer,
            rtg,
            discount,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].steps.len()
    }

    /// `q`-quantile of episode returns (nearest rank).
    pub fn return_quantile(&self, q: f64) -> f64 {
        let mut r: Vec<f64> = self.trajectories.iter().map(Trajectory::total_return).collect();
        r.sort_by(f64::total_cmp);
        let k = ((q * r.len() as f64).ceil() as usize).clamp(1, r.len());
        r[k - 1]
    }

    /// The model input for step `t` of trajectory `i`.
    pub fn token(&self, i: usize, t: usize) -> TokenInput {
        let steps = &self.trajectories[i].steps;
        TokenInput {
            rtg: self.rtg[i][t],
            state: steps[t].state,
            prev_action: if t == 0 { 0.0 } else { steps[t - 1].action },
        }
    }
}

/// A token batch with the candidate factors of the expert head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub tokens: TokenBatch,
    /// `num_experts` factors per row.
    pub factors: Vec<f64>,
}

/// Draws the batch for training step `step`. Every step has its own random
/// stream, so a resumed run sees the same batches.
pub fn sample_batch(
    dataset: &TrajectoryDataset,
    model: &ModelConfig,
    train: &TrainConfig,
    step: u64,
) -> Result<TrainBatch> {
    let mut rng = rng::stream(mix_seed(train.seed, streams::BATCHES), step);
    build_batch(dataset, model, train, &mut rng)
}

/// Uniform (trajectory, end step) pairs; each window holds up to `seq_len`
/// steps ending at the drawn step, left-padded.
pub fn build_batch<R: Rng + ?Sized>(
    dataset: &TrajectoryDataset,
    model: &ModelConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<TrainBatch> {
    if dataset.is_empty() {
        return Err(GradError::Empty("trajectory dataset"));
    }
    let (seq, bs) = (train.seq_len, train.batch_size);
    let horizon = dataset.horizon();
    let norm = &dataset.normalizer;
    let mut tokens = TokenBatch::new(bs, seq);
    let sigma = train.sigma_frac * model.rtg_scale;
    for b in 0..bs {
        let i = rng.gen_range(0..dataset.len());
        let end = rng.gen_range(0..horizon);
        let start = (end + 1).saturating_sub(seq);
        let window: Vec<TokenInput> = (start..=end).map(|t| dataset.token(i, t)).collect();
        tokens.set_window(b, &window, norm)?;
        let traj = &dataset.trajectories[i];
        let offset = seq - window.len();
        for (k, t) in (start..=end).enumerate() {
            let row = b * seq + offset + k;
            let step = &traj.steps[t];
            tokens.actions[row] = step.action;
            let mut ctx = ValueContext::from_state(
                &step.state,
                dataset.rtg[i][t],
                traj.config.cpc_limit,
                train.gamma_pen,
                sigma,
            );
            ctx.temporal = train.temporal;
            tokens.value_targets[row] = dynamic_target(&ctx, rng) / model.rtg_scale;
            if train.value_weight_ramp {
                tokens.value_weights[row] = 1.0 + t as f64 / horizon as f64;
            }
        }
    }
    let m = model.moe.num_experts;
    let (lo, hi) = (model.moe.perturb_low, model.moe.perturb_high);
    let factors = (0..tokens.rows() * m).map(|_| rng.gen_range(lo..hi)).collect();
    Ok(TrainBatch { tokens, factors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EpisodeConfig;
    use crate::train::{generate_behavior_data, BehaviorConfig};

    fn dataset(n: usize) -> (TrajectoryDataset, ModelConfig, TrainConfig) {
        let env = EpisodeConfig::default();
        let b = BehaviorConfig {
            num_episodes: n,
            ..BehaviorConfig::default()
        };
        let model = ModelConfig::desk();
        let train = TrainConfig::desk();
        let data = generate_behavior_data(&env, &b, 1).unwrap();
        (TrajectoryDataset::new(data, &model, &train).unwrap(), model, train)
    }

    #[test]
    fn early_windows_are_left_padded_and_masked() {
        let (d, model, train) = dataset(3);
        for step in 0..50 {
            let batch = sample_batch(&d, &model, &train, step).unwrap();
            let tb = &batch.tokens;
            for b in 0..tb.batch {
                let rows = &tb.mask[b * tb.seq..(b + 1) * tb.seq];
                let valid = rows.iter().filter(|&&m| m).count();
                assert!(rows[..tb.seq - valid].iter().all(|m| !m));
                for r in b * tb.seq..b * tb.seq + tb.seq - valid {
                    assert_eq!(tb.actions[r], 0.0);
                    assert_eq!(tb.value_weights[r], 0.0);
                }
            }
        }
    }

    #[test]
    fn window_ending_at_fifth_step_has_fifteen_pads() {
        let (d, model, train) = dataset(2);
        // steps are 0-based here, so the fifth step is index 4
        let window: Vec<TokenInput> = (0..=4).map(|t| d.token(0, t)).collect();
        let tb = TokenBatch::single(&window, model.seq_len, &d.normalizer).unwrap();
        assert_eq!(tb.mask.iter().filter(|m| !**m).count(), 15);
        assert_eq!(train.seq_len, 20);
        assert_eq!(d.token(0, 0).prev_action, 0.0);
        assert_eq!(d.token(0, 1).prev_action, d.trajectories[0].steps[0].action);
    }

    #[test]
    fn batches_are_deterministic_per_step() {
        let (d, model, train) = dataset(3);
        assert_eq!(
            sample_batch(&d, &model, &train, 7).unwrap(),
            sample_batch(&d, &model, &train, 7).unwrap()
        );
        assert_ne!(
            sample_batch(&d, &model, &train, 7).unwrap(),
            sample_batch(&d, &model, &train, 8).unwrap()
        );
    }

    #[test]
    fn noiseless_value_targets_follow_the_formula() {
        let (d, model, mut train) = dataset(2);
        train.sigma_frac = 0.0;
        let batch = sample_batch(&d, &model, &train, 0).unwrap();
        let tb = &batch.tokens;
        for (r, &valid) in tb.mask.iter().enumerate() {
            if valid {
                assert!(tb.value_targets[r].is_finite());
                assert!(tb.value_targets[r] >= 0.0);
            }
        }
    }

    #[test]
    fn discounted_returns_are_optional() {
        let (d, model, mut train) = dataset(2);
        train.discounted_rtg = true;
        let dd = TrajectoryDataset::new(d.trajectories.clone(), &model, &train).unwrap();
        assert!(dd.rtg[0][0] < d.rtg[0][0]);
        let last = d.horizon() - 1;
        assert_eq!(dd.rtg[0][last], d.rtg[0][last]);
    }
}

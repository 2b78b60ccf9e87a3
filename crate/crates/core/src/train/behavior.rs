//! Logging policy for the offline dataset.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::BehaviorConfig;
use crate::env::{run_episode, BiddingPolicy, EpisodeConfig, StepState, Trajectory, TrajectoryStep};
use crate::error::Result;
use crate::rng::{self, mix_seed, streams};

/// Pacing controller on the bid coefficient.
///
/// The error is how far spend lags the linear schedule, in steps:
/// `e = (t/T - spent/B) * T`. The coefficient is
/// `base * exp(kp*e + ki*I + kd*(e - e_prev))`, clamped to
/// `[min_coef, max_coef]`, with the integral `I` clamped to
/// `±integral_limit` to prevent windup.
#[derive(Debug, Clone)]
pub struct PidController {
    pub config: BehaviorConfig,
    pub num_steps: usize,
    integral: f64,
    prev_error: f64,
}

impl PidController {
    pub fn new(config: BehaviorConfig, num_steps: usize) -> Self {
        Self {
            config,
            num_steps,
            integral: 0.0,
            prev_error: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = 0.0;
    }

    pub fn control(&mut self, state: &StepState) -> f64 {
        let c = &self.config;
        let f = &state.features;
        let spent_frac = 1.0 - f[2];
        let e = (f[0] - spent_frac) * self.num_steps as f64;
        let lim = c.pid_integral_limit;
        self.integral = (self.integral + e).clamp(-lim, lim);
        let d = e - self.prev_error;
        self.prev_error = e;
        let u = c.pid_kp * e + c.pid_ki * self.integral + c.pid_kd * d;
        (c.pid_base * u.exp()).clamp(c.pid_min_coef, c.pid_max_coef)
    }
}

impl BiddingPolicy for PidController {
    fn act(&mut self, state: &StepState, _: &[TrajectoryStep]) -> Result<f64> {
        Ok(self.control(state))
    }
}

/// PID controller whose every output is multiplied by a factor drawn from
/// `U[behavior_low, behavior_high)`. The unperturbed outputs are kept.
#[derive(Debug, Clone)]
pub struct PerturbedPid {
    pub pid: PidController,
    rng: ChaCha8Rng,
    pub nominal: Vec<f64>,
}

impl PerturbedPid {
    pub fn new(pid: PidController, rng: ChaCha8Rng) -> Self {
        Self {
            pid,
            rng,
            nominal: Vec::new(),
        }
    }
}

impl BiddingPolicy for PerturbedPid {
    fn act(&mut self, state: &StepState, _: &[TrajectoryStep]) -> Result<f64> {
        let a = self.pid.control(state);
        self.nominal.push(a);
        let c = &self.pid.config;
        let f = if c.behavior_low < c.behavior_high {
            self.rng.gen_range(c.behavior_low..c.behavior_high)
        } else {
            c.behavior_low
        };
        Ok(a * f)
    }
}

/// Seed of the `i`-th logged episode.
pub fn behavior_episode_seed(seed: u64, i: usize) -> u64 {
    mix_seed(mix_seed(seed, streams::BEHAVIOR), i as u64)
}

/// One logged episode plus the controller's unperturbed actions.
pub fn log_episode(env: &EpisodeConfig, behavior: &BehaviorConfig, episode_seed: u64) -> Result<(Trajectory, Vec<f64>)> {
    let mut rng = rng::stream(episode_seed, streams::BEHAVIOR);
    let jitter = if behavior.budget_jitter_low < behavior.budget_jitter_high {
        rng.gen_range(behavior.budget_jitter_low..behavior.budget_jitter_high)
    } else {
        behavior.budget_jitter_low
    };
    let config = EpisodeConfig {
        budget: env.budget * jitter,
        seed: episode_seed,
        ..env.clone()
    };
    let mut policy = PerturbedPid::new(PidController::new(*behavior, config.num_steps), rng);
    let result = run_episode(&mut policy, &config)?;
    Ok((result.trajectory, policy.nominal))
}

/// Runs `behavior.num_episodes` perturbed-PID episodes on `env`.
pub fn generate_behavior_data(env: &EpisodeConfig, behavior: &BehaviorConfig, seed: u64) -> Result<Vec<Trajectory>> {
    env.validate()?;
    behavior.validate()?;
    (0..behavior.num_episodes)
        .map(|i| log_episode(env, behavior, behavior_episode_seed(seed, i)).map(|(t, _)| t))
        .collect()
}

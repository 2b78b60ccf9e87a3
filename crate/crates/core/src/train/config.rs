use serde::{Deserialize, Serialize};

use crate::diff::AdamWConfig;
use crate::error::{GradError, Result};
use crate::model::TemporalFactor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_steps: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub lambda_b: f64,
    pub lambda_d: f64,
    pub use_action_moe: bool,
    pub use_value_estimator: bool,
    /// Stop value-loss gradients at the backbone output.
    pub value_stop_grad: bool,
    /// Weight the value loss by `1 + t/T`.
    pub value_weight_ramp: bool,
    /// Cost-penalty exponent of the value target.
    pub gamma_pen: f64,
    /// Target noise standard deviation as a fraction of `rtg_scale`.
    pub sigma_frac: f64,
    pub temporal: TemporalFactor,
    /// Train on discounted returns-to-go with `discount`.
    pub discounted_rtg: bool,
    pub discount: f64,
    /// Listed hyperparameters with no consumer; kept for config parity.
    pub tau: f64,
    pub expectile: f64,
    /// Checkpoint every this many steps (0 disables intermediate saves).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            num_steps: 3000,
            seq_len: 20,
            lr: 1e-3,
            weight_decay: 1e-2,
            adam_eps: 1e-8,
            lambda_b: 0.1,
            lambda_d: 0.1,
            use_action_moe: true,
            use_value_estimator: true,
            value_stop_grad: false,
            value_weight_ramp: false,
            gamma_pen: 2.0,
            sigma_frac: 0.01,
            temporal: TemporalFactor::Increasing,
            discounted_rtg: false,
            discount: 0.99,
            tau: 0.01,
            expectile: 0.7,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    pub fn large() -> Self {
        Self {
            batch_size: 128,
            num_steps: 400_000,
            lr: 1e-5,
            ..Self::desk()
        }
    }

    /// Plain behavior cloning: both auxiliary heads off.
    pub fn behavior_cloning(self) -> Self {
        Self {
            use_action_moe: false,
            use_value_estimator: false,
            ..self
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GradError::InvalidConfig(m));
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if !(self.lr > 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and adam_eps must be positive, weight_decay nonnegative".into());
        }
        if !(self.lambda_b >= 0.0 && self.lambda_d >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if self.gamma_pen < 1.0 {
            return bad(format!("gamma_pen {} below 1", self.gamma_pen));
        }
        if !(self.sigma_frac >= 0.0) {
            return bad("sigma_frac must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad(format!("discount {} outside [0, 1]", self.discount));
        }
        Ok(())
    }
}

/// Perturbed PID pacing controller used to log the offline data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    pub num_episodes: usize,
    pub pid_kp: f64,
    pub pid_ki: f64,
    pub pid_kd: f64,
    /// Coefficient when spend is exactly on schedule and the integral is 0.
    pub pid_base: f64,
    /// Bound on the accumulated integral error.
    pub pid_integral_limit: f64,
    pub pid_min_coef: f64,
    pub pid_max_coef: f64,
    /// Multiplicative noise on every logged action.
    pub behavior_low: f64,
    pub behavior_high: f64,
    /// Each logged episode draws its budget from this range times the base.
    pub budget_jitter_low: f64,
    pub budget_jitter_high: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            num_episodes: 500,
            pid_kp: 0.5,
            pid_ki: 0.05,
            pid_kd: 0.0,
            pid_base: 1.2,
            pid_integral_limit: 10.0,
            pid_min_coef: 0.05,
            pid_max_coef: 8.0,
            behavior_low: 0.8,
            behavior_high: 1.2,
            budget_jitter_low: 0.5,
            budget_jitter_high: 1.5,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GradError::InvalidConfig(m.to_string()));
        if self.num_episodes == 0 {
            return bad("num_episodes must be at least 1");
        }
        if !(self.pid_base > 0.0 && 0.0 < self.pid_min_coef && self.pid_min_coef < self.pid_max_coef) {
            return bad("PID coefficients must satisfy 0 < min < max and base > 0");
        }
        if !(0.0 < self.behavior_low && self.behavior_low <= self.behavior_high) {
            return bad("behavior noise range must satisfy 0 < low <= high");
        }
        if !(0.0 < self.budget_jitter_low && self.budget_jitter_low <= self.budget_jitter_high) {
            return bad("budget jitter range must satisfy 0 < low <= high");
        }
        if self.pid_integral_limit < 0.0 {
            return bad("pid_integral_limit must be nonnegative");
        }
        Ok(())
    }
}

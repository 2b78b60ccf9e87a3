use rand::Rng;
use rand_distr::{Beta, Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};

/// Number of features in a [`StepState`].
pub const STATE_DIM: usize = 16;

/// Prices and values are snapped to this grid so that every partial sum in an
/// episode is exact in `f64`, independent of summation order.
pub const PRICE_RESOLUTION: f64 = 1.0 / (1u64 << 24) as f64;

pub(crate) fn quantize(x: f64) -> f64 {
    (x / PRICE_RESOLUTION).round() * PRICE_RESOLUTION
}

/// One auction round as seen by the bidder before bidding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpressionOpportunity {
    pub value: f64,
    pub pctr: f64,
    pub competitor_bid: f64,
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub won: bool,
    pub cost: f64,
    pub clicked: bool,
}

/// Parametric distribution used to draw impression values and competing bids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Beta { alpha: f64, beta: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
            Distribution::LogNormal { mu, sigma } => mu.is_finite() && sigma >= 0.0,
            Distribution::Uniform { low, high } => low.is_finite() && high > low,
            Distribution::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(GradError::InvalidConfig(format!("bad distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Beta { alpha, beta } => Beta::new(alpha, beta)
                .expect("validated beta parameters")
                .sample(rng),
            Distribution::LogNormal { mu, sigma } => LogNormal::new(mu, sigma)
                .expect("validated lognormal parameters")
                .sample(rng),
            Distribution::Uniform { low, high } => rng.gen_range(low..high),
            Distribution::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub budget: f64,
    pub cpc_limit: f64,
    pub num_steps: usize,
    pub impressions_per_step: usize,
    pub value_distribution: Distribution,
    pub competitor_distribution: Distribution,
    /// Predicted CTR is `min(1, value * pctr_scale)`.
    pub pctr_scale: f64,
    /// Normalizer for the previous-action feature.
    pub action_ceiling: f64,
    /// Normalizer for the cumulative-value feature.
    pub value_scale: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            budget: 300.0,
            cpc_limit: 10.0,
            num_steps: 48,
            impressions_per_step: 50,
            value_distribution: Distribution::Beta {
                alpha: 2.0,
                beta: 5.0,
            },
            competitor_distribution: Distribution::LogNormal {
                mu: -1.0,
                sigma: 0.5,
            },
            pctr_scale: 0.1,
            action_ceiling: 10.0,
            value_scale: 500.0,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GradError::InvalidConfig(m.to_string()));
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return bad("budget must be positive");
        }
        if !(self.cpc_limit > 0.0 && self.cpc_limit.is_finite()) {
            return bad("cpc_limit must be positive");
        }
        if self.num_steps == 0 || self.impressions_per_step == 0 {
            return bad("num_steps and impressions_per_step must be positive");
        }
        if !(self.pctr_scale >= 0.0 && self.action_ceiling > 0.0 && self.value_scale > 0.0) {
            return bad("pctr_scale, action_ceiling and value_scale must be positive");
        }
        self.value_distribution.validate()?;
        self.competitor_distribution.validate()
    }

    pub fn total_impressions(&self) -> usize {
        self.num_steps * self.impressions_per_step
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_budget(&self, budget: f64) -> Self {
        Self {
            budget,
            ..self.clone()
        }
    }

    /// Draws the opportunities of one step.
    pub fn sample_opportunities<R: Rng + ?Sized>(
        &self,
        step_index: usize,
        rng: &mut R,
    ) -> Vec<ImpressionOpportunity> {
        (0..self.impressions_per_step)
            .map(|_| {
                let value = quantize(self.value_distribution.sample(rng).clamp(0.0, 1.0));
                let competitor_bid = quantize(self.competitor_distribution.sample(rng).max(0.0));
                ImpressionOpportunity {
                    value,
                    pctr: (value * self.pctr_scale).min(1.0),
                    competitor_bid,
                    step_index,
                }
            })
            .collect()
    }
}

/// Campaign state vector. See [`super::featurize_state`] for the layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub features: [f64; STATE_DIM],
}

impl StepState {
    /// Headroom allowed above 1 for the normalized ratio features.
    pub const RATIO_HEADROOM: f64 = 0.5;

    pub fn is_well_formed(&self) -> bool {
        self.features.iter().all(|x| x.is_finite())
            && self.features[..5]
                .iter()
                .all(|&x| (0.0..=1.0 + Self::RATIO_HEADROOM).contains(&x))
    }
}

/// Budget accounting for one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetLedger {
    pub budget: f64,
    pub spent: f64,
}

impl BudgetLedger {
    pub fn new(budget: f64) -> Self {
        Self { budget, spent: 0.0 }
    }

    pub fn remaining(&self) -> f64 {
        self.budget - self.spent
    }

    /// Charges `cost` if it fits; returns whether it did.
    pub fn try_charge(&mut self, cost: f64) -> bool {
        if self.spent + cost <= self.budget {
            self.spent += cost;
            true
        } else {
            false
        }
    }
}

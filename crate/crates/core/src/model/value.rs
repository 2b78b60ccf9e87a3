//! Regression target for the value head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::STATE_DIM;

/// Shape of the time multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemporalFactor {
    /// `exp(t_frac)`, in `[1, e]`.
    #[default]
    Increasing,
    /// `exp(-t_frac)`, in `[1/e, 1]`.
    Decreasing,
    /// `exp(t_frac * horizon)`, i.e. the exponent in raw steps.
    RawSteps { horizon: usize },
}

impl TemporalFactor {
    pub fn eval(self, t_frac: f64) -> f64 {
        match self {
            TemporalFactor::Increasing => t_frac.exp(),
            TemporalFactor::Decreasing => (-t_frac).exp(),
            TemporalFactor::RawSteps { horizon } => (t_frac * horizon as f64).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueContext {
    /// Elapsed fraction of the episode.
    pub t_frac: f64,
    /// Realized CPC so far (0 before the first click).
    pub cpc_t: f64,
    pub cpc_limit: f64,
    /// Remaining budget fraction.
    pub budget_frac: f64,
    pub rtg: f64,
    pub gamma_pen: f64,
    pub sigma: f64,
    #[serde(default)]
    pub temporal: TemporalFactor,
}

impl ValueContext {
    /// Context from a raw (unnormalized) state vector: elapsed fraction,
    /// remaining budget and the CPC ratio are read from features 0, 2 and 4.
    pub fn from_state(
        state: &[f64; STATE_DIM],
        rtg: f64,
        cpc_limit: f64,
        gamma_pen: f64,
        sigma: f64,
    ) -> Self {
        Self {
            t_frac: state[0],
            cpc_t: state[4] * cpc_limit,
            cpc_limit,
            budget_frac: state[2],
            rtg,
            gamma_pen,
            sigma,
            temporal: TemporalFactor::Increasing,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.t_frac)
            && (0.0..=1.0).contains(&self.budget_frac)
            && self.cpc_t >= 0.0
            && self.cpc_limit > 0.0
            && self.gamma_pen >= 1.0
            && self.sigma >= 0.0
            && self.rtg.is_finite()
    }
}

/// Cost penalty `min(1, (C / cpc_t)^gamma)`, 1 before any click.
pub fn cost_penalty(cpc_t: f64, cpc_limit: f64, gamma_pen: f64) -> f64 {
    if cpc_t <= 0.0 {
        1.0
    } else {
        (cpc_limit / cpc_t).powf(gamma_pen).min(1.0)
    }
}

/// Noise-free target `Gamma(t) * Omega * Pi * g`.
pub fn target_mean(ctx: &ValueContext) -> f64 {
    ctx.temporal.eval(ctx.t_frac)
        * cost_penalty(ctx.cpc_t, ctx.cpc_limit, ctx.gamma_pen)
        * ctx.budget_frac
        * ctx.rtg
}

/// Target plus `N(0, sigma^2)` noise drawn from `rng` (no draw when
/// `sigma == 0`).
pub fn dynamic_target<R: Rng + ?Sized>(ctx: &ValueContext, rng: &mut R) -> f64 {
    let mean = target_mean(ctx);
    if ctx.sigma > 0.0 {
        mean + Normal::new(0.0, ctx.sigma).expect("sigma is finite").sample(rng)
    } else {
        mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(t_frac: f64, cpc_t: f64, budget_frac: f64, rtg: f64, gamma_pen: f64) -> ValueContext {
        ValueContext {
            t_frac,
            cpc_t,
            cpc_limit: 2.0,
            budget_frac,
            rtg,
            gamma_pen,
            sigma: 0.0,
            temporal: TemporalFactor::Increasing,
        }
    }

    #[test]
    fn identity_multipliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dynamic_target(&ctx(0.0, 1.0, 1.0, 7.25, 2.0), &mut rng), 7.25);
        assert_eq!(dynamic_target(&ctx(0.0, 0.0, 1.0, 7.25, 2.0), &mut rng), 7.25);
    }

    #[test]
    fn hand_evaluated_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dynamic_target(&ctx(0.0, 4.0, 1.0, 10.0, 1.0), &mut rng), 5.0);
        let r = dynamic_target(&ctx(1.0, 1.0, 0.5, 10.0, 2.0), &mut rng);
        assert!((r - 13.591409142295225).abs() < 1e-12);
    }

    #[test]
    fn temporal_variants() {
        assert_eq!(TemporalFactor::Decreasing.eval(0.0), 1.0);
        assert!((TemporalFactor::Decreasing.eval(1.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(TemporalFactor::RawSteps { horizon: 48 }.eval(0.5), 24.0f64.exp());
    }

    #[test]
    fn state_context_reads_features() {
        let mut s = [0.0; STATE_DIM];
        s[0] = 0.25;
        s[2] = 0.6;
        s[4] = 1.5;
        let c = ValueContext::from_state(&s, 3.0, 10.0, 2.0, 0.0);
        assert_eq!(c.t_frac, 0.25);
        assert_eq!(c.budget_frac, 0.6);
        assert_eq!(c.cpc_t, 15.0);
        assert!(c.is_valid());
    }
}

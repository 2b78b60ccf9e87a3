use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{featurize_state, FeatureContext, StepAggregate};
use super::trajectory::{compute_rtg, EpisodeSummary, Trajectory, TrajectoryStep};
use super::types::{AuctionOutcome, BudgetLedger, EpisodeConfig, ImpressionOpportunity, StepState};
use crate::error::{GradError, Result};
use crate::rng::{self, streams};

/// Bid for one impression under a scalar coefficient: `coef * value`.
///
/// A zero coefficient is accepted and bids 0 (it never wins against a
/// positive competitor).
pub fn compute_bid(coef: f64, opp: &ImpressionOpportunity) -> Result<f64> {
    if !coef.is_finite() || coef < 0.0 {
        return Err(GradError::InvalidCoefficient(coef));
    }
    Ok(coef * opp.value)
}

/// Result of one decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub outcomes: Vec<AuctionOutcome>,
    pub reward: f64,
    pub aggregate: StepAggregate,
}

/// Runs the auctions of one step in order, charging the ledger.
///
/// An impression is won iff the bid strictly exceeds the competing bid and
/// the second price still fits the remaining budget. Clicks are drawn only
/// for won impressions.
pub fn run_step<R: Rng + ?Sized>(
    coef: f64,
    opportunities: &[ImpressionOpportunity],
    ledger: &mut BudgetLedger,
    rng: &mut R,
) -> Result<StepOutcome> {
    let mut outcomes = Vec::with_capacity(opportunities.len());
    let mut agg = StepAggregate {
        impressions: opportunities.len() as u64,
        ..StepAggregate::default()
    };
    for opp in opportunities {
        let bid = compute_bid(coef, opp)?;
        let mut outcome = AuctionOutcome::default();
        if bid > opp.competitor_bid && ledger.try_charge(opp.competitor_bid) {
            outcome.won = true;
            outcome.cost = opp.competitor_bid;
            outcome.clicked = rng.gen::<f64>() < opp.pctr;
            agg.wins += 1;
            agg.cost += outcome.cost;
            agg.value += opp.value;
            agg.clicks += u64::from(outcome.clicked);
        }
        outcomes.push(outcome);
    }
    Ok(StepOutcome {
        outcomes,
        reward: agg.value,
        aggregate: agg,
    })
}

/// Anything that maps the current state (and the steps taken so far) to a
/// bid coefficient.
///
/// `history` holds the completed steps of the current episode; their `rtg`
/// field is not known yet and is 0.
pub trait BiddingPolicy {
    fn act(&mut self, state: &StepState, history: &[TrajectoryStep]) -> Result<f64>;
}

impl<F> BiddingPolicy for F
where
    F: FnMut(&StepState, &[TrajectoryStep]) -> f64,
{
    fn act(&mut self, state: &StepState, history: &[TrajectoryStep]) -> Result<f64> {
        Ok(self(state, history))
    }
}

/// A policy that always bids the same coefficient.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub f64);

impl BiddingPolicy for ConstantPolicy {
    fn act(&mut self, _: &StepState, _: &[TrajectoryStep]) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub total_value: f64,
    pub total_cost: f64,
    pub total_clicks: u64,
    pub per_step_rewards: Vec<f64>,
    pub per_step_costs: Vec<f64>,
    pub per_step_clicks: Vec<u64>,
    /// `total_cost / max(total_clicks, 1)`.
    pub realized_cpc: f64,
    pub trajectory: Trajectory,
    /// All opportunities, step-major.
    pub opportunities: Vec<ImpressionOpportunity>,
    /// Outcome of each entry of `opportunities`.
    pub outcomes: Vec<AuctionOutcome>,
}

impl EpisodeResult {
    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            total_value: self.total_value,
            total_cost: self.total_cost,
            total_clicks: self.total_clicks,
            total_conversions: None,
        }
    }

    /// Per-step CPC `cost_t / max(clicks_t, 1)`.
    pub fn per_step_cpc(&self) -> Vec<f64> {
        self.per_step_costs
            .iter()
            .zip(&self.per_step_clicks)
            .map(|(c, &k)| c / k.max(1) as f64)
            .collect()
    }
}

/// Draws every opportunity of an episode. The draw depends only on the
/// config (including its seed), never on the policy.
pub fn sample_episode_opportunities(config: &EpisodeConfig) -> Result<Vec<ImpressionOpportunity>> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, streams::OPPORTUNITIES);
    let mut out = Vec::with_capacity(config.total_impressions());
    for t in 0..config.num_steps {
        out.extend(config.sample_opportunities(t, &mut rng));
    }
    Ok(out)
}

/// Runs one full episode, calling `policy` once per step.
pub fn run_episode<P: BiddingPolicy + ?Sized>(
    policy: &mut P,
    config: &EpisodeConfig,
) -> Result<EpisodeResult> {
    let opportunities = sample_episode_opportunities(config)?;
    let mut click_rng = rng::stream(config.seed, streams::CLICKS);
    let n = config.num_steps;
    let per = config.impressions_per_step;
    let mut ledger = BudgetLedger::new(config.budget);
    let mut history: Vec<StepAggregate> = Vec::with_capacity(n);
    let mut steps: Vec<TrajectoryStep> = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(opportunities.len());
    let (mut clicks, mut value, mut prev_action) = (0u64, 0.0, 0.0);
    let (mut costs, mut step_clicks) = (Vec::with_capacity(n), Vec::with_capacity(n));

    for t in 0..n {
        let state = featurize_state(&FeatureContext {
            t,
            num_steps: n,
            budget: config.budget,
            spent: ledger.spent,
            clicks,
            value_so_far: value,
            cpc_limit: config.cpc_limit,
            prev_action,
            action_ceiling: config.action_ceiling,
            value_scale: config.value_scale,
            history: &history,
        })?;
        let action = policy.act(&state, &steps)?;
        if !action.is_finite() || action < 0.0 {
            return Err(GradError::InvalidAction { step: t, action });
        }
        let step = run_step(action, &opportunities[t * per..(t + 1) * per], &mut ledger, &mut click_rng)?;
        clicks += step.aggregate.clicks;
        value += step.reward;
        costs.push(step.aggregate.cost);
        step_clicks.push(step.aggregate.clicks);
        history.push(step.aggregate);
        outcomes.extend(step.outcomes);
        steps.push(TrajectoryStep {
            t,
            state: state.features,
            action,
            reward: step.reward,
            rtg: 0.0,
        });
        prev_action = action;
    }

    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    for (s, g) in steps.iter_mut().zip(compute_rtg(&rewards)) {
        s.rtg = g;
    }
    let total_cost = ledger.spent;
    let summary = EpisodeSummary {
        total_value: value,
        total_cost,
        total_clicks: clicks,
        total_conversions: None,
    };
    Ok(EpisodeResult {
        total_value: value,
        total_cost,
        total_clicks: clicks,
        per_step_rewards: rewards,
        per_step_costs: costs,
        per_step_clicks: step_clicks,
        realized_cpc: total_cost / clicks.max(1) as f64,
        trajectory: Trajectory {
            episode_id: config.seed,
            config: config.clone(),
            steps,
            summary: Some(summary),
        },
        opportunities,
        outcomes,
    })
}

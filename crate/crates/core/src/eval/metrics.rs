use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::EpisodeSummary;
use crate::error::{GradError, Result};

/// Default penalty exponent.
pub const DEFAULT_BETA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    /// Cost per conversion.
    Cpa,
    /// Cost per click.
    Cpc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    pub limit: f64,
    pub beta: f64,
}

impl ConstraintSpec {
    pub fn cpc(limit: f64) -> Self {
        Self {
            kind: ConstraintKind::Cpc,
            limit,
            beta: DEFAULT_BETA,
        }
    }

    pub fn cpa(limit: f64) -> Self {
        Self {
            kind: ConstraintKind::Cpa,
            limit,
            beta: DEFAULT_BETA,
        }
    }
}

impl FromStr for ConstraintSpec {
    type Err = GradError;

    /// `cpc:<limit>` or `cpa:<limit>`, optionally followed by `:<beta>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GradError::InvalidConfig(format!("bad constraint {s:?}, expected cpc:<limit>"));
        let mut parts = s.split(':');
        let kind = match parts.next().map(str::to_ascii_lowercase).as_deref() {
            Some("cpc") => ConstraintKind::Cpc,
            Some("cpa") => ConstraintKind::Cpa,
            _ => return Err(bad()),
        };
        let limit: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let beta = match parts.next() {
            Some(b) => b.parse().map_err(|_| bad())?,
            None => DEFAULT_BETA,
        };
        if parts.next().is_some() || !(limit > 0.0 && limit.is_finite()) || !beta.is_finite() {
            return Err(bad());
        }
        Ok(Self { kind, limit, beta })
    }
}

/// `min((limit / ratio)^beta, 1)` with `ratio = cost / max(count, 1)`.
/// No cost means no violation.
pub fn penalty(cost: f64, count: f64, limit: f64, beta: f64) -> f64 {
    if cost <= 0.0 {
        return 1.0;
    }
    let ratio = cost / count.max(1.0);
    (limit / ratio).powf(beta).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub total_value: f64,
    pub total_cost: f64,
    /// One per constraint, in `(0, 1]`.
    pub penalties: Vec<f64>,
    /// Realized cost ratio per constraint (0 without cost).
    pub ratios: Vec<f64>,
    pub score: f64,
    pub episodes: usize,
}

impl ScoreReport {
    pub fn min_penalty(&self) -> f64 {
        self.penalties.iter().copied().fold(1.0, f64::min)
    }
}

/// Pools the episodes and scores `total_value * min_j penalty_j`.
pub fn score(episodes: &[EpisodeSummary], constraints: &[ConstraintSpec]) -> Result<ScoreReport> {
    if episodes.is_empty() {
        return Err(GradError::Empty("episode results"));
    }
    let total_value: f64 = episodes.iter().map(|e| e.total_value).sum();
    let total_cost: f64 = episodes.iter().map(|e| e.total_cost).sum();
    let mut penalties = Vec::with_capacity(constraints.len());
    let mut ratios = Vec::with_capacity(constraints.len());
    for c in constraints {
        let count: u64 = match c.kind {
            ConstraintKind::Cpc => episodes.iter().map(|e| e.total_clicks).sum(),
            ConstraintKind::Cpa => episodes
                .iter()
                .map(|e| {
                    e.total_conversions.ok_or_else(|| {
                        GradError::InvalidConfig("CPA constraint needs conversion counts".into())
                    })
                })
                .sum::<Result<u64>>()?,
        };
        let count = count as f64;
        penalties.push(penalty(total_cost, count, c.limit, c.beta));
        ratios.push(if total_cost > 0.0 {
            total_cost / count.max(1.0)
        } else {
            0.0
        });
    }
    let mut report = ScoreReport {
        total_value,
        total_cost,
        penalties,
        ratios,
        score: 0.0,
        episodes: episodes.len(),
    };
    report.score = total_value * report.min_penalty();
    Ok(report)
}

/// Percentage of periods whose CPC is at most `gamma_tol * c_target`.
pub fn cpc_cr(cpcs: &[f64], c_target: f64, gamma_tol: f64) -> Result<f64> {
    if cpcs.is_empty() {
        return Err(GradError::Empty("CPC series"));
    }
    let ok = cpcs.iter().filter(|&&c| c <= gamma_tol * c_target).count();
    Ok(ok as f64 / cpcs.len() as f64 * 100.0)
}

/// `ln(1 + 1000 ctr) - [active] * min(p_max, ((cpc - theta) / theta)^3)`.
pub fn online_reward(ctr: f64, cpc: f64, theta: f64, p_max: f64, active: bool) -> f64 {
    let engagement = (1.0 + 1000.0 * ctr).ln();
    if active {
        engagement - p_max.min(((cpc - theta) / theta).powi(3))
    } else {
        engagement
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(value: f64, cost: f64, clicks: u64) -> EpisodeSummary {
        EpisodeSummary {
            total_value: value,
            total_cost: cost,
            total_clicks: clicks,
            total_conversions: None,
        }
    }

    #[test]
    fn within_limit_scores_total_value() {
        let r = score(&[ep(10.0, 5.0, 10)], &[ConstraintSpec::cpc(1.0)]).unwrap();
        assert_eq!(r.penalties, vec![1.0]);
        assert_eq!(r.score, 10.0);
    }

    #[test]
    fn violation_is_penalized_quadratically() {
        let r = score(&[ep(10.0, 30.0, 15)], &[ConstraintSpec::cpc(1.0)]).unwrap();
        assert_eq!(r.ratios, vec![2.0]);
        assert!((r.penalties[0] - 0.25).abs() < 1e-12);
        assert!((r.score - 2.5).abs() < 1e-12);
    }

    #[test]
    fn worst_constraint_wins() {
        let mut e = ep(10.0, 30.0, 15);
        e.total_conversions = Some(100);
        let r = score(&[e], &[ConstraintSpec::cpa(1.0), ConstraintSpec::cpc(1.0)]).unwrap();
        assert_eq!(r.penalties[0], 1.0);
        assert_eq!(r.min_penalty(), 0.25);
    }

    #[test]
    fn cost_without_clicks_uses_a_floor_of_one() {
        assert_eq!(penalty(4.0, 0.0, 2.0, 2.0), 0.25);
        assert_eq!(penalty(0.0, 0.0, 2.0, 2.0), 1.0);
    }

    #[test]
    fn cpa_needs_conversions() {
        assert!(score(&[ep(1.0, 1.0, 1)], &[ConstraintSpec::cpa(1.0)]).is_err());
        assert!(score(&[], &[]).is_err());
    }

    #[test]
    fn constraint_strings() {
        let c: ConstraintSpec = "cpc:2.5".parse().unwrap();
        assert_eq!(c, ConstraintSpec::cpc(2.5));
        let c: ConstraintSpec = "CPA:3:1".parse().unwrap();
        assert_eq!((c.kind, c.limit, c.beta), (ConstraintKind::Cpa, 3.0, 1.0));
        assert!("cpm:1".parse::<ConstraintSpec>().is_err());
        assert!("cpc:-1".parse::<ConstraintSpec>().is_err());
    }

    #[test]
    fn compliance_rate() {
        assert_eq!(cpc_cr(&[1.0, 1.0, 1.0, 5.0, 5.0], 1.0, 1.2).unwrap(), 60.0);
        assert_eq!(cpc_cr(&[1.2], 1.0, 1.2).unwrap(), 100.0);
        assert!(cpc_cr(&[], 1.0, 1.2).is_err());
    }

    #[test]
    fn reward_cases() {
        assert_eq!(online_reward(0.0, 5.0, 1.0, 10.0, false), 0.0);
        assert!((online_reward(0.001, 0.0, 1.0, 10.0, false) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(online_reward(0.0, 2.0, 1.0, 10.0, true), -1.0);
        assert_eq!(online_reward(0.0, 100.0, 1.0, 10.0, true), -10.0);
    }
}

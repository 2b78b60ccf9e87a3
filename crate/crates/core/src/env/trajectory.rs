//! Line-delimited trajectory records (one episode per line).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::types::{EpisodeConfig, STATE_DIM};
use crate::error::{GradError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub state: [f64; STATE_DIM],
    pub action: f64,
    pub reward: f64,
    pub rtg: f64,
}

/// Episode totals needed to score a trajectory without replaying it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub total_value: f64,
    pub total_cost: f64,
    pub total_clicks: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_conversions: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub config: EpisodeConfig,
    pub steps: Vec<TrajectoryStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<EpisodeSummary>,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn actions(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Episode return (`rtg` at the first step).
    pub fn total_return(&self) -> f64 {
        self.steps.first().map_or(0.0, |s| s.rtg)
    }

    /// Checks `rtg[t] == rtg[t+1] + reward[t]` exactly and `rtg[T-1] == reward[T-1]`.
    pub fn rtg_telescopes(&self) -> bool {
        let n = self.steps.len();
        if n == 0 {
            return true;
        }
        if self.steps[n - 1].rtg != self.steps[n - 1].reward {
            return false;
        }
        (0..n - 1).all(|t| self.steps[t].rtg == self.steps[t + 1].rtg + self.steps[t].reward)
    }
}

/// Undiscounted suffix sums `g_t = sum_{tau >= t} r_tau`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc: Option<f64> = None;
    for (t, r) in rewards.iter().enumerate().rev() {
        let g = match acc {
            None => *r,
            Some(next) => next + r,
        };
        out[t] = g;
        acc = Some(g);
    }
    out
}

/// Discounted variant `g_t = r_t + gamma * g_{t+1}`.
pub fn compute_discounted_rtg(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        next = r + gamma * next;
        out[t] = next;
    }
    out
}

pub fn write_trajectories<W: Write>(mut w: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| {
            GradError::InvalidConfig(format!("trajectory line {}: {e}", lineno + 1))
        })?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rtg_suffix_sums() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[0.0; 4]), vec![0.0; 4]);
        assert_eq!(compute_rtg(&[2.5]), vec![2.5]);
        assert!(compute_rtg(&[]).is_empty());
    }

    #[test]
    fn discounted_rtg_with_unit_gamma_matches_undiscounted() {
        let r = [1.0, 2.0, 3.0];
        assert_eq!(compute_discounted_rtg(&r, 1.0), compute_rtg(&r));
        let d = compute_discounted_rtg(&r, 0.5);
        assert_eq!(d, vec![1.0 + 0.5 * (2.0 + 0.5 * 3.0), 2.0 + 1.5, 3.0]);
    }

    #[test]
    fn record_field_order_is_fixed() {
        let t = Trajectory {
            episode_id: 3,
            config: EpisodeConfig::default(),
            steps: vec![TrajectoryStep {
                t: 0,
                state: [0.1; STATE_DIM],
                action: 1.0 / 3.0,
                reward: 0.2,
                rtg: 0.2,
            }],
            summary: None,
        };
        let line = serde_json::to_string(&t).unwrap();
        let e = line.find("\"episode_id\"").unwrap();
        let c = line.find("\"config\"").unwrap();
        let s = line.find("\"steps\"").unwrap();
        assert!(e < c && c < s);
        let step = &line[s..];
        let order = ["\"t\"", "\"state\"", "\"action\"", "\"reward\"", "\"rtg\""]
            .map(|k| step.find(k).unwrap());
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert!(!line.contains("summary"));
    }
}

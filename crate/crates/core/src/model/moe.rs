//! Exploration head helpers that do not need the compute graph: candidate
//! perturbation, top-1 routing, action refinement and the two auxiliary
//! losses evaluated on plain values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};

/// Smallest action emitted after clamping, as a fraction of the action scale.
pub const ACTION_FLOOR: f64 = 1e-6;

/// Clamps into `(0, scale]`.
pub fn clamp_action(x: f64, scale: f64) -> f64 {
    x.clamp(ACTION_FLOOR * scale, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateActionSet {
    pub candidates: Vec<f64>,
    pub factors: Vec<f64>,
}

/// `M` candidates `prev_action * f` with `f ~ U[low, high)`.
pub fn perturb_candidates<R: Rng + ?Sized>(
    prev_action: f64,
    m: usize,
    low: f64,
    high: f64,
    rng: &mut R,
) -> Result<CandidateActionSet> {
    if m < 1 {
        return Err(GradError::InvalidConfig("need at least one candidate".into()));
    }
    let factors: Vec<f64> = (0..m).map(|_| rng.gen_range(low..high)).collect();
    let candidates = factors.iter().map(|f| prev_action * f).collect();
    Ok(CandidateActionSet {
        candidates,
        factors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub probabilities: Vec<f64>,
    pub chosen: usize,
    pub gate: Vec<f64>,
}

impl RoutingDecision {
    /// Softmax over `logits`, top-1 with lowest-index tie-break.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(GradError::Empty("routing logits"));
        }
        let probabilities = crate::diff::softmax(logits);
        Ok(Self::from_probabilities(probabilities))
    }

    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let chosen = argmax(&probabilities);
        let mut gate = vec![0.0; probabilities.len()];
        gate[chosen] = 1.0;
        Self {
            probabilities,
            chosen,
            gate,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        let sum: f64 = self.probabilities.iter().sum();
        (sum - 1.0).abs() <= 1e-12
            && self.probabilities.iter().all(|p| (0.0..=1.0).contains(p))
            && self.gate.iter().filter(|&&g| g == 1.0).count() == 1
            && self.gate.iter().all(|&g| g == 0.0 || g == 1.0)
            && self.gate[self.chosen] == 1.0
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Routes `h` by dot products with each expert embedding.
pub fn route(h: &[f64], expert_embeddings: &[Vec<f64>]) -> Result<RoutingDecision> {
    let mut logits = Vec::with_capacity(expert_embeddings.len());
    for e in expert_embeddings {
        if e.len() != h.len() {
            return Err(GradError::LengthMismatch {
                left: h.len(),
                right: e.len(),
            });
        }
        logits.push(h.iter().zip(e).map(|(a, b)| a * b).sum());
    }
    RoutingDecision::from_logits(&logits)
}

/// Load-balancing term `M * sum_m u_m * p_m` where `u_m` is the share of
/// tokens routed to `m` and `p_m` the mean routing probability.
pub fn aux_balance(decisions: &[RoutingDecision]) -> Result<f64> {
    let first = decisions.first().ok_or(GradError::Empty("routing batch"))?;
    let m = first.probabilities.len();
    let n = decisions.len() as f64;
    let mut usage = vec![0.0; m];
    let mut mean_p = vec![0.0; m];
    for d in decisions {
        if d.probabilities.len() != m {
            return Err(GradError::LengthMismatch {
                left: m,
                right: d.probabilities.len(),
            });
        }
        usage[d.chosen] += 1.0;
        for (acc, p) in mean_p.iter_mut().zip(&d.probabilities) {
            *acc += p;
        }
    }
    Ok(m as f64
        * usage
            .iter()
            .zip(&mean_p)
            .map(|(u, p)| (u / n) * (p / n))
            .sum::<f64>())
}

/// `lambda_aux * AUX + (1 - lambda_aux) * mean_tokens ||h - h_shared||^2`.
pub fn balance_loss(
    decisions: &[RoutingDecision],
    hidden: &[Vec<f64>],
    shared: &[Vec<f64>],
    lambda_aux: f64,
) -> Result<f64> {
    let aux = aux_balance(decisions)?;
    if hidden.len() != decisions.len() || shared.len() != decisions.len() {
        return Err(GradError::LengthMismatch {
            left: decisions.len(),
            right: hidden.len().min(shared.len()),
        });
    }
    let anchor = hidden
        .iter()
        .zip(shared)
        .map(|(h, s)| h.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / decisions.len() as f64;
    Ok(lambda_aux * aux + (1.0 - lambda_aux) * anchor)
}

/// Mean over candidates of the cosine between each refined-action sequence
/// and the nominal action sequence.
pub fn diversity_loss(ensemble: &[Vec<f64>], nominal: &[f64]) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(GradError::Empty("candidate ensemble"));
    }
    let mut total = 0.0;
    for member in ensemble {
        if member.len() != nominal.len() {
            return Err(GradError::LengthMismatch {
                left: member.len(),
                right: nominal.len(),
            });
        }
        total += crate::diff::cosine_similarity(member, nominal);
    }
    Ok(total / ensemble.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedActions {
    /// `omega_m * a_m + U` per candidate.
    pub ensemble: Vec<f64>,
    /// `U + sum_m omega_m * a_m`.
    pub aggregate: f64,
}

/// Residual refinement of the candidates; every output is clamped into
/// `(0, action_scale]`.
pub fn refine_actions(
    residual: f64,
    candidates: &CandidateActionSet,
    weights: &[f64],
    action_scale: f64,
) -> Result<RefinedActions> {
    if weights.len() != candidates.candidates.len() {
        return Err(GradError::LengthMismatch {
            left: weights.len(),
            right: candidates.candidates.len(),
        });
    }
    let weighted: Vec<f64> = candidates
        .candidates
        .iter()
        .zip(weights)
        .map(|(a, w)| w * a)
        .collect();
    Ok(RefinedActions {
        ensemble: weighted
            .iter()
            .map(|x| clamp_action(x + residual, action_scale))
            .collect(),
        aggregate: clamp_action(residual + weighted.iter().sum::<f64>(), action_scale),
    })
}

/// Frequencies with which each of `m` experts was chosen.
pub fn usage_frequencies(chosen: &[usize], m: usize) -> Vec<f64> {
    let mut f = vec![0.0; m];
    for &c in chosen {
        f[c] += 1.0;
    }
    let n = chosen.len().max(1) as f64;
    f.iter_mut().for_each(|x| *x /= n);
    f
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

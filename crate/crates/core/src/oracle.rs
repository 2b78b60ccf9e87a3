//! Exact and greedy solvers for the offline bidding problem: choose a subset
//! of impressions maximizing value under a budget and an optional CPC cap.

use serde::{Deserialize, Serialize};

use crate::env::ImpressionOpportunity;
use crate::error::{GradError, Result};

/// Largest instance [`solve_bruteforce`] accepts.
pub const MAX_BRUTEFORCE: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpressionItem {
    pub value: f64,
    #[serde(default)]
    pub pctr: f64,
    /// Price paid if the impression is won.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiddingInstance {
    pub impressions: Vec<ImpressionItem>,
    pub budget: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpc_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub selection: Vec<bool>,
    pub total_value: f64,
    pub total_cost: f64,
    /// `(lambda0, lambda1)` when the solver produces a threshold.
    pub dual_coefficients: Option<(f64, f64)>,
}

impl BiddingInstance {
    pub fn budget_only(values: &[f64], costs: &[f64], budget: f64) -> Result<Self> {
        if values.len() != costs.len() {
            return Err(GradError::LengthMismatch {
                left: values.len(),
                right: costs.len(),
            });
        }
        let inst = Self {
            impressions: values
                .iter()
                .zip(costs)
                .map(|(&value, &cost)| ImpressionItem {
                    value,
                    pctr: 0.0,
                    cost,
                })
                .collect(),
            budget,
            cpc_limit: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// The hindsight problem of one episode: every opportunity priced at its
    /// competing bid.
    pub fn from_opportunities(
        opportunities: &[ImpressionOpportunity],
        budget: f64,
        cpc_limit: Option<f64>,
    ) -> Self {
        Self {
            impressions: opportunities
                .iter()
                .map(|o| ImpressionItem {
                    value: o.value,
                    pctr: o.pctr,
                    cost: o.competitor_bid,
                })
                .collect(),
            budget,
            cpc_limit,
        }
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GradError::InvalidConfig(m));
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return bad(format!("budget must be nonnegative, got {}", self.budget));
        }
        if let Some(c) = self.cpc_limit {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("cpc_limit must be positive, got {c}"));
            }
        }
        for (i, it) in self.impressions.iter().enumerate() {
            let ok = it.value >= 0.0
                && it.value.is_finite()
                && it.cost >= 0.0
                && it.cost.is_finite()
                && (0.0..=1.0).contains(&it.pctr);
            if !ok {
                return bad(format!("impression {i} has invalid fields {it:?}"));
            }
        }
        Ok(())
    }

    /// Sums over the selection, always accumulated in index order.
    fn totals(&self, selection: &[bool]) -> (f64, f64, f64) {
        let mut v = 0.0;
        let mut c = 0.0;
        let mut p = 0.0;
        for (it, &x) in self.impressions.iter().zip(selection) {
            if x {
                v += it.value;
                c += it.cost;
                p += it.pctr;
            }
        }
        (v, c, p)
    }

    pub fn is_feasible(&self, selection: &[bool]) -> bool {
        if selection.len() != self.len() {
            return false;
        }
        let (_, cost, clicks) = self.totals(selection);
        if cost > self.budget {
            return false;
        }
        match self.cpc_limit {
            Some(limit) if clicks > 0.0 => cost / clicks <= limit,
            _ => true,
        }
    }

    fn solution(&self, selection: Vec<bool>, duals: Option<(f64, f64)>) -> OracleSolution {
        let (total_value, total_cost, _) = self.totals(&selection);
        OracleSolution {
            selection,
            total_value,
            total_cost,
            dual_coefficients: duals,
        }
    }
}

/// Exhaustive search over all `2^I` selections.
///
/// Ties in value go to the lower cost, then to the lexicographically smallest
/// selection (`false < true`, index 0 first).
pub fn solve_bruteforce(instance: &BiddingInstance) -> Result<OracleSolution> {
    instance.validate()?;
    let n = instance.len();
    if n > MAX_BRUTEFORCE {
        return Err(GradError::InstanceTooLarge(n));
    }
    let mut best: Option<(f64, f64, Vec<bool>)> = None;
    let mut sel = vec![false; n];
    for mask in 0u32..(1u32 << n) {
        for (i, x) in sel.iter_mut().enumerate() {
            *x = mask >> i & 1 == 1;
        }
        if !instance.is_feasible(&sel) {
            continue;
        }
        let (v, c, _) = instance.totals(&sel);
        let better = match &best {
            None => true,
            Some((bv, bc, bs)) => {
                v > *bv || (v == *bv && (c < *bc || (c == *bc && sel < *bs)))
            }
        };
        if better {
            best = Some((v, c, sel.clone()));
        }
    }
    // The empty selection is always feasible, so `best` is set.
    let (_, _, selection) = best.expect("empty selection is feasible");
    Ok(instance.solution(selection, None))
}

/// Greedy by value-per-cost on a budget-only instance.
///
/// Free items with positive value come first, then items by descending
/// `v/c` (ties by index); each item is taken if it still fits. The returned
/// `lambda0` is `c/v` of the first item that did not fit, so that the bid
/// rule "win iff `lambda0 * v > c`" reproduces the greedy prefix.
pub fn solve_threshold(instance: &BiddingInstance) -> Result<OracleSolution> {
    instance.validate()?;
    if instance.cpc_limit.is_some() {
        return Err(GradError::InvalidConfig(
            "threshold solver needs a budget-only instance".into(),
        ));
    }
    let order = greedy_order(instance);
    let mut selection = vec![false; instance.len()];
    let mut spent = 0.0;
    let mut critical = None;
    for &i in &order {
        let it = instance.impressions[i];
        if spent + it.cost <= instance.budget {
            spent += it.cost;
            selection[i] = true;
        } else if critical.is_none() {
            critical = Some(it.cost / it.value);
        }
    }
    let lambda = critical.or_else(|| {
        order
            .iter()
            .map(|&i| instance.impressions[i])
            .map(|it| it.cost / it.value)
            .fold(None, |m: Option<f64>, q| Some(m.map_or(q, |m| m.max(q))))
            .map(|q| if q > 0.0 { 2.0 * q } else { 1.0 })
    });
    Ok(instance.solution(selection, lambda.map(|l| (l, 0.0))))
}

/// Indices with positive value, by descending `v/c` (free items first),
/// ties by index.
fn greedy_order(instance: &BiddingInstance) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instance.len())
        .filter(|&i| instance.impressions[i].value > 0.0)
        .collect();
    // Compare c_i/v_i ascending, which is v/c descending with c = 0 first.
    order.sort_by(|&a, &b| {
        let (ia, ib) = (instance.impressions[a], instance.impressions[b]);
        (ia.cost / ia.value)
            .partial_cmp(&(ib.cost / ib.value))
            .expect("validated finite")
            .then(a.cmp(&b))
    });
    order
}

/// A `lambda` such that "select iff `lambda * v_i > c_i`" matches `selection`
/// on all but at most one impression, if one exists. Among such values the
/// one with the fewest mismatches (then the smallest) is returned.
pub fn closed_form_witness(instance: &BiddingInstance, selection: &[bool]) -> Option<f64> {
    if selection.len() != instance.len() {
        return None;
    }
    let ratios: Vec<Option<f64>> = instance
        .impressions
        .iter()
        .map(|it| (it.value > 0.0).then(|| it.cost / it.value))
        .collect();
    let mut distinct: Vec<f64> = ratios.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    distinct.dedup();

    let mismatches = |lambda: f64| {
        ratios
            .iter()
            .zip(selection)
            .filter(|(q, &x)| q.is_some_and(|q| q < lambda) != x)
            .count()
    };
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    // Below every positive ratio: only free items are selected.
    let first_positive = distinct.iter().copied().find(|&q| q > 0.0);
    candidates.push(first_positive.map_or(1.0, |q| q / 2.0));
    for (k, &q) in distinct.iter().enumerate() {
        let next = distinct.get(k + 1).copied();
        candidates.push(match next {
            Some(n) => (q + n) / 2.0,
            None if q > 0.0 => 2.0 * q,
            None => 1.0,
        });
    }
    candidates
        .into_iter()
        .filter(|&l| l > 0.0)
        .map(|l| (mismatches(l), l))
        .filter(|&(m, _)| m <= 1)
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .map(|(_, l)| l)
}

/// Whether `solution` has the single-threshold structure of the closed-form
/// bid rule, allowing one boundary impression to differ.
pub fn certify_closed_form(instance: &BiddingInstance, solution: &OracleSolution) -> bool {
    closed_form_witness(instance, &solution.selection).is_some()
}

/// Value of the fractional (LP) relaxation of the budget constraint alone.
/// Bounds the value of every budget-feasible selection, with or without a
/// CPC cap.
pub fn fractional_upper_bound(instance: &BiddingInstance) -> Result<f64> {
    instance.validate()?;
    let mut remaining = instance.budget;
    let mut value = 0.0;
    for i in greedy_order(instance) {
        let it = instance.impressions[i];
        if it.cost <= remaining {
            remaining -= it.cost;
            value += it.value;
        } else {
            value += it.value * remaining / it.cost;
            break;
        }
    }
    Ok(value)
}

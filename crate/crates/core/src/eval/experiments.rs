//! Budget sweeps, ablations and expert-count sweeps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{cpc_cr, score, ConstraintSpec};
use super::rollout::{eval_episode_seed, rollout, ActionMode};
use crate::diff::fnv1a;
use crate::env::EpisodeConfig;
use crate::error::{GradError, Result};
use crate::oracle::{fractional_upper_bound, BiddingInstance};
use crate::train::{train_run, Checkpoint, RunConfig, TrainConfig};

/// Budget levels as fractions of the reference budget.
pub const BUDGET_LEVELS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
/// Budget levels of the ablation table.
pub const ABLATION_LEVELS: [f64; 3] = [0.5, 0.75, 1.5];
pub const EXPERT_COUNTS: [usize; 3] = [4, 6, 8];
/// CPC compliance tolerance.
pub const DEFAULT_GAMMA_TOL: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Evaluation episodes per (model, level).
    pub episodes: usize,
    pub eval_seed: u64,
    pub mode: ActionMode,
    /// Empty means a CPC constraint at the environment's limit.
    pub constraints: Vec<ConstraintSpec>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 10,
            eval_seed: 0,
            mode: ActionMode::Exploit,
            constraints: Vec::new(),
        }
    }
}

impl EvalSettings {
    fn constraints_for(&self, env: &EpisodeConfig) -> Vec<ConstraintSpec> {
        if self.constraints.is_empty() {
            vec![ConstraintSpec::cpc(env.cpc_limit)]
        } else {
            self.constraints.clone()
        }
    }
}

/// One evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode_seed: u64,
    pub budget: f64,
    pub total_value: f64,
    pub total_cost: f64,
    pub total_clicks: u64,
    pub realized_cpc: f64,
    pub penalty: f64,
    pub score: f64,
    pub cpc_cr: f64,
    /// Fractional-relaxation value of the episode's hindsight problem.
    pub oracle_bound: f64,
}

/// Rolls out `settings.episodes` episodes at `level` times the reference
/// budget.
pub fn evaluate_level(
    checkpoint: &Checkpoint,
    env: &EpisodeConfig,
    level: f64,
    settings: &EvalSettings,
) -> Result<Vec<EpisodeEval>> {
    if settings.episodes == 0 {
        return Err(GradError::Empty("evaluation episodes"));
    }
    let m = &checkpoint.manifest;
    if env.num_steps != m.env.num_steps {
        return Err(GradError::InvalidConfig(format!(
            "checkpoint was trained on {}-step episodes, environment has {}",
            m.env.num_steps, env.num_steps
        )));
    }
    let constraints = settings.constraints_for(env);
    (0..settings.episodes)
        .map(|i| {
            let config = EpisodeConfig {
                budget: env.budget * level,
                seed: eval_episode_seed(settings.eval_seed, i),
                ..env.clone()
            };
            let r = rollout(&checkpoint.model, &m.normalizer, m.target_return, settings.mode, &config)?;
            let report = score(&[r.summary()], &constraints)?;
            let instance = BiddingInstance::from_opportunities(&r.opportunities, config.budget, None);
            Ok(EpisodeEval {
                episode_seed: config.seed,
                budget: config.budget,
                total_value: r.total_value,
                total_cost: r.total_cost,
                total_clicks: r.total_clicks,
                realized_cpc: r.realized_cpc,
                penalty: report.min_penalty(),
                score: report.score,
                cpc_cr: cpc_cr(&r.per_step_cpc(), env.cpc_limit, DEFAULT_GAMMA_TOL)?,
                oracle_bound: fractional_upper_bound(&instance)?,
            })
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GradError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: f64,
    pub budget: f64,
    /// Mean episode score per model or seed.
    pub scores: Vec<f64>,
    pub mean_score: f64,
    pub std_score: f64,
    pub mean_value: f64,
    pub mean_oracle_bound: f64,
    /// Every episode's oracle bound is at least its score and value.
    pub oracle_dominates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub fingerprint: String,
}

impl SweepResult {
    /// Spearman correlation between budget level and mean score.
    pub fn monotonicity(&self) -> Result<f64> {
        let levels: Vec<f64> = self.rows.iter().map(|r| r.level).collect();
        let scores: Vec<f64> = self.rows.iter().map(|r| r.mean_score).collect();
        spearman(&levels, &scores)
    }

    /// Mean scores never decrease from one level to the next.
    pub fn is_non_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_score >= w[0].mean_score)
    }
}

/// Flat CSV row of a sweep level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub level: f64,
    pub budget: f64,
    pub mean_score: f64,
    pub std_score: f64,
    pub mean_value: f64,
    pub mean_oracle_bound: f64,
    pub oracle_dominates: bool,
}

impl SweepResult {
    pub fn csv_rows(&self) -> Vec<SweepCsvRow> {
        self.rows
            .iter()
            .map(|r| SweepCsvRow {
                level: r.level,
                budget: r.budget,
                mean_score: r.mean_score,
                std_score: r.std_score,
                mean_value: r.mean_value,
                mean_oracle_bound: r.mean_oracle_bound,
                oracle_dominates: r.oracle_dominates,
            })
            .collect()
    }
}

fn fingerprint<T: Serialize>(v: &T) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(&serde_json::to_string(v)?)))
}

/// Evaluates each (checkpoint, evaluation seed) unit at every level.
pub fn budget_sweep(
    units: &[(&Checkpoint, u64)],
    env: &EpisodeConfig,
    levels: &[f64],
    settings: &EvalSettings,
) -> Result<SweepResult> {
    if units.is_empty() {
        return Err(GradError::Empty("sweep seeds"));
    }
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut scores = Vec::new();
        let mut values = Vec::new();
        let mut bounds = Vec::new();
        let mut dominates = true;
        for &(ckpt, seed) in units {
            let s = EvalSettings {
                eval_seed: seed,
                ..settings.clone()
            };
            let eps = evaluate_level(ckpt, env, level, &s)?;
            dominates &= eps
                .iter()
                .all(|e| e.oracle_bound >= e.total_value && e.oracle_bound >= e.score);
            scores.push(mean(&eps.iter().map(|e| e.score).collect::<Vec<_>>()));
            values.push(mean(&eps.iter().map(|e| e.total_value).collect::<Vec<_>>()));
            bounds.push(mean(&eps.iter().map(|e| e.oracle_bound).collect::<Vec<_>>()));
        }
        rows.push(SweepRow {
            level,
            budget: env.budget * level,
            mean_score: mean(&scores),
            std_score: std_dev(&scores),
            scores,
            mean_value: mean(&values),
            mean_oracle_bound: mean(&bounds),
            oracle_dominates: dominates,
        });
    }
    let manifests: Vec<_> = units
        .iter()
        .map(|(c, s)| (&c.manifest, *s))
        .collect();
    Ok(SweepResult {
        rows,
        fingerprint: fingerprint(&(manifests, env, levels, settings))?,
    })
}

/// A single checkpoint evaluated under several evaluation seeds.
pub fn run_sweep(
    checkpoint: &Checkpoint,
    env: &EpisodeConfig,
    levels: &[f64],
    seeds: &[u64],
    settings: &EvalSettings,
) -> Result<SweepResult> {
    let units: Vec<(&Checkpoint, u64)> = seeds.iter().map(|&s| (checkpoint, s)).collect();
    budget_sweep(&units, env, levels, settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    WithoutActionMoe,
    WithoutValueEstimator,
    BehaviorCloning,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutActionMoe,
        Variant::WithoutValueEstimator,
        Variant::BehaviorCloning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutActionMoe => "w/o A",
            Variant::WithoutValueEstimator => "w/o V",
            Variant::BehaviorCloning => "w/o A&V",
        }
    }

    pub fn apply(self, c: TrainConfig) -> TrainConfig {
        match self {
            Variant::Full => c,
            Variant::WithoutActionMoe => TrainConfig {
                use_action_moe: false,
                ..c
            },
            Variant::WithoutValueEstimator => TrainConfig {
                use_value_estimator: false,
                ..c
            },
            Variant::BehaviorCloning => c.behavior_cloning(),
        }
    }
}

/// Trains `variant` once per seed; returns the checkpoints in seed order.
pub fn train_variant(
    base: &RunConfig,
    variant: Variant,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<Vec<Checkpoint>> {
    seeds
        .iter()
        .map(|&seed| {
            progress(&format!("training {} seed {seed}", variant.name()));
            let mut run = base.clone();
            run.train = variant.apply(run.train);
            run.train.seed = seed;
            Ok(train_run(&run, None)?.checkpoint)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Mean score over seeds, one per level.
    pub scores: Vec<f64>,
    /// `variant - full`, one per level.
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub variant: String,
    pub level: f64,
    pub score: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }

    /// One record per (variant, level) cell.
    pub fn csv_rows(&self) -> Vec<AblationCsvRow> {
        self.rows
            .iter()
            .flat_map(|r| {
                self.levels
                    .iter()
                    .zip(r.scores.iter().zip(&r.deltas))
                    .map(move |(&level, (&score, &delta))| AblationCsvRow {
                        variant: r.variant.clone(),
                        level,
                        score,
                        delta,
                    })
            })
            .collect()
    }
}

/// Scores already-trained variants. `trained[v][s]` is variant `v` trained
/// with seed `s`; each is evaluated with evaluation seed `s`.
pub fn ablation_table(
    variants: &[Variant],
    trained: &[Vec<Checkpoint>],
    seeds: &[u64],
    env: &EpisodeConfig,
    levels: &[f64],
    settings: &EvalSettings,
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(GradError::InvalidConfig("ablation needs at least 3 seeds".into()));
    }
    let mut scores = Vec::new();
    for ckpts in trained {
        let units: Vec<(&Checkpoint, u64)> = ckpts.iter().zip(seeds.iter().copied()).collect();
        let sweep = budget_sweep(&units, env, levels, settings)?;
        scores.push(sweep.rows.iter().map(|r| r.mean_score).collect::<Vec<_>>());
    }
    let full = variants
        .iter()
        .position(|v| *v == Variant::Full)
        .map(|i| scores[i].clone());
    let rows = variants
        .iter()
        .zip(scores)
        .map(|(v, s)| AblationRow {
            variant: v.name().to_string(),
            deltas: match &full {
                Some(f) => s.iter().zip(f).map(|(a, b)| a - b).collect(),
                None => vec![f64::NAN; s.len()],
            },
            scores: s,
        })
        .collect();
    Ok(AblationTable {
        levels: levels.to_vec(),
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Trains every variant for every seed and tabulates the scores.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    levels: &[f64],
    settings: &EvalSettings,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let trained = variants
        .iter()
        .map(|&v| train_variant(base, v, seeds, &mut progress))
        .collect::<Result<Vec<_>>>()?;
    ablation_table(variants, &trained, seeds, &base.env, levels, settings)
}

/// Expert-count sweep metrics. Exceed rate and CPC ratio are this crate's
/// definitions: the fraction of episodes whose realized CPC exceeds the
/// limit, and the mean of realized CPC over the limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRow {
    pub num_experts: usize,
    pub score: f64,
    pub total_reward: f64,
    pub exceed_rate: f64,
    pub cpc_ratio: f64,
}

impl ExpertRow {
    pub fn from_episodes(num_experts: usize, episodes: &[EpisodeEval], cpc_limit: f64) -> Self {
        let n = episodes.len().max(1) as f64;
        Self {
            num_experts,
            score: episodes.iter().map(|e| e.score).sum::<f64>() / n,
            total_reward: episodes.iter().map(|e| e.total_value).sum::<f64>() / n,
            exceed_rate: episodes.iter().filter(|e| e.realized_cpc > cpc_limit).count() as f64 / n,
            cpc_ratio: episodes.iter().map(|e| e.realized_cpc / cpc_limit).sum::<f64>() / n,
        }
    }
}

/// Trains the full model for each expert count and seed, evaluating at the
/// reference budget.
pub fn run_expert_sweep(
    base: &RunConfig,
    counts: &[usize],
    seeds: &[u64],
    settings: &EvalSettings,
    mut progress: impl FnMut(&str),
) -> Result<Vec<ExpertRow>> {
    counts
        .iter()
        .map(|&m| {
            let mut run = base.clone();
            run.model.moe.num_experts = m;
            let ckpts = train_variant(&run, Variant::Full, seeds, |s| {
                progress(&format!("{s} with {m} experts"))
            })?;
            let mut episodes = Vec::new();
            for (c, &seed) in ckpts.iter().zip(seeds) {
                let s = EvalSettings {
                    eval_seed: seed,
                    ..settings.clone()
                };
                episodes.extend(evaluate_level(c, &base.env, 1.0, &s)?);
            }
            Ok(ExpertRow::from_episodes(m, &episodes, base.env.cpc_limit))
        })
        .collect()
}

/// Writes `<stem>.json` and one CSV row per item to `<stem>.csv`.
pub fn write_report<T: Serialize, R: Serialize>(
    dir: &Path,
    stem: &str,
    whole: &T,
    rows: &[R],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(whole)?)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0, 50.0]).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&x, &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12, "{r}");
        assert_eq!(spearman(&x, &[1.0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn expert_metrics_recompute_from_episodes() {
        let ep = |value: f64, cpc: f64| EpisodeEval {
            episode_seed: 0,
            budget: 1.0,
            total_value: value,
            total_cost: 1.0,
            total_clicks: 1,
            realized_cpc: cpc,
            penalty: 1.0,
            score: value,
            cpc_cr: 100.0,
            oracle_bound: 100.0,
        };
        let row = ExpertRow::from_episodes(4, &[ep(2.0, 5.0), ep(4.0, 15.0)], 10.0);
        assert_eq!(row.score, 3.0);
        assert_eq!(row.exceed_rate, 0.5);
        assert_eq!(row.cpc_ratio, 1.0);
        assert!((0.0..=1.0).contains(&row.exceed_rate));
    }

    #[test]
    fn variants_flip_the_right_flags() {
        let c = TrainConfig::desk();
        assert!(Variant::Full.apply(c).use_action_moe);
        let b = Variant::BehaviorCloning.apply(c);
        assert!(!b.use_action_moe && !b.use_value_estimator);
        let a = Variant::WithoutActionMoe.apply(c);
        assert!(!a.use_action_moe && a.use_value_estimator);
        let v = Variant::WithoutValueEstimator.apply(c);
        assert!(v.use_action_moe && !v.use_value_estimator);
    }
}

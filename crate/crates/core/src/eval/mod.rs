//! Scoring, rollouts and experiment drivers.

mod experiments;
mod metrics;
mod rollout;

pub use experiments::{
    ablation_table, budget_sweep, evaluate_level, mean, run_ablation, run_expert_sweep, run_sweep,
    spearman, std_dev, train_variant, write_report, AblationCsvRow, AblationRow, AblationTable, EpisodeEval,
    EvalSettings, ExpertRow, SweepCsvRow, SweepResult, SweepRow, Variant, ABLATION_LEVELS, BUDGET_LEVELS,
    DEFAULT_GAMMA_TOL, EXPERT_COUNTS,
};
pub use metrics::{
    cpc_cr, online_reward, penalty, score, ConstraintKind, ConstraintSpec, ScoreReport,
    DEFAULT_BETA,
};
pub use rollout::{eval_episode_seed, rollout, ActionMode, ModelPolicy};

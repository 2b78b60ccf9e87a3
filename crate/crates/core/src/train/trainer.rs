use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{BehaviorConfig, TrainConfig};
use super::dataset::{sample_batch, TrainBatch, TrajectoryDataset};
use crate::diff::{AdamW, Graph, NodeId, ParameterStore, Tensor};
use crate::env::EpisodeConfig;
use crate::error::{GradError, Result};
use crate::model::{
    balance_loss_node, diversity_loss_node, weighted_mse, ForwardOptions, GradModel, ModelConfig,
    Normalizer,
};

/// Loss components of one training step. Disabled components are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub policy: f64,
    pub value: f64,
    pub balance: f64,
    pub diversity: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `policy + value + lambda_b * balance + lambda_d * diversity`.
    pub fn weighted_sum(&self, lambda_b: f64, lambda_d: f64) -> f64 {
        self.policy + self.value + lambda_b * self.balance + lambda_d * self.diversity
    }
}

/// Loss graph of one batch: the scalar root and its components.
pub struct LossNodes {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

fn finite(component: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(GradError::NonFiniteLoss { component, value })
    }
}

/// Builds the composite loss of `batch` on `g`.
///
/// Terms whose weight is 0 are reported but not attached to the root, so
/// their parameters receive no gradient.
pub fn build_loss(
    model: &GradModel,
    config: &TrainConfig,
    g: &mut Graph,
    batch: &TrainBatch,
) -> Result<LossNodes> {
    let tb = &batch.tokens;
    let opts = ForwardOptions {
        value_head: config.use_value_estimator,
        value_stop_grad: config.value_stop_grad,
        candidate_factors: config.use_action_moe.then_some(batch.factors.as_slice()),
    };
    let out = model.forward(g, tb, &opts)?;
    let weights: Vec<f64> = tb.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let policy = weighted_mse(g, out.actions, &tb.actions, &weights)?;
    let mut b = LossBreakdown {
        policy: finite("policy", g.value(policy).item())?,
        ..LossBreakdown::default()
    };
    let mut total = policy;
    if let Some(values) = out.values {
        let v = weighted_mse(g, values, &tb.value_targets, &tb.value_weights)?;
        b.value = finite("value", g.value(v).item())?;
        total = g.add(total, v)?;
    }
    if let Some(moe) = &out.moe {
        let bal = balance_loss_node(g, moe, out.hidden, &tb.mask, model.config.moe.lambda_aux)?;
        b.balance = finite("balance", g.value(bal).item())?;
        let nominal = g.value(out.actions).data().to_vec();
        let div = diversity_loss_node(g, moe.refined, &nominal, &tb.mask, tb.seq)?;
        b.diversity = finite("diversity", g.value(div).item())?;
        if config.lambda_b != 0.0 {
            let t = g.scale(bal, config.lambda_b);
            total = g.add(total, t)?;
        }
        if config.lambda_d != 0.0 {
            let t = g.scale(div, config.lambda_d);
            total = g.add(total, t)?;
        }
    }
    b.total = finite("total", g.value(total).item())?;
    Ok(LossNodes {
        total,
        breakdown: b,
    })
}

/// Gradients of every parameter reached from the root.
pub fn parameter_gradients(g: &Graph) -> BTreeMap<String, Tensor> {
    g.params()
        .iter()
        .filter_map(|(name, &id)| g.grad(id).map(|t| (name.clone(), t.clone())))
        .collect()
}

/// Result of one optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Parameter paths changed by this update.
    pub updated: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: GradModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Number of completed updates.
    pub step: u64,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.seq_len > model.seq_len {
            return Err(GradError::InvalidConfig(format!(
                "training window {} exceeds the model context {}",
                config.seq_len, model.seq_len
            )));
        }
        Ok(Self {
            model: GradModel::new(model, config.seed)?,
            optimizer: AdamW::new(config.optimizer()),
            config,
            step: 0,
        })
    }

    /// Loss of `batch` without updating anything.
    pub fn evaluate(&self, batch: &TrainBatch) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let mut b = build_loss(&self.model, &self.config, &mut g, batch)?.breakdown;
        b.step = self.step;
        Ok(b)
    }

    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepReport> {
        let mut g = Graph::new();
        let nodes = build_loss(&self.model, &self.config, &mut g, batch)?;
        g.backward(nodes.total)?;
        let grads = parameter_gradients(&g);
        let updated = self.optimizer.step(&mut self.model.params, &grads);
        let mut losses = nodes.breakdown;
        losses.step = self.step;
        self.step += 1;
        Ok(StepReport { losses, updated })
    }

    /// Trains until `config.num_steps` updates have been made, calling
    /// `on_step` after each.
    pub fn fit<F>(&mut self, dataset: &TrajectoryDataset, mut on_step: F) -> Result<Vec<LossBreakdown>>
    where
        F: FnMut(&Trainer, &LossBreakdown) -> Result<()>,
    {
        let mut trace = Vec::new();
        while (self.step as usize) < self.config.num_steps {
            let batch = sample_batch(dataset, &self.model.config, &self.config, self.step)?;
            let report = self.train_step(&batch)?;
            on_step(self, &report.losses)?;
            trace.push(report.losses);
        }
        Ok(trace)
    }
}

const CHECKPOINT_FORMAT: &str = "grad-checkpoint-v1";

/// Everything needed to roll out or resume a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub env: EpisodeConfig,
    #[serde(default)]
    pub behavior: BehaviorConfig,
    pub normalizer: Normalizer,
    /// Return-to-go the policy is conditioned on at the start of a rollout.
    pub target_return: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: GradModel,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn from_trainer(
        trainer: &Trainer,
        env: &EpisodeConfig,
        behavior: &BehaviorConfig,
        normalizer: &Normalizer,
        target_return: f64,
    ) -> Self {
        Self {
            manifest: CheckpointManifest {
                format: CHECKPOINT_FORMAT.to_string(),
                step: trainer.step,
                model: trainer.model.config,
                train: trainer.config,
                env: env.clone(),
                behavior: *behavior,
                normalizer: normalizer.clone(),
                target_return,
            },
            model: trainer.model.clone(),
            optimizer: Some(trainer.optimizer.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.params.save(dir, "params")?;
        if let Some(opt) = &self.optimizer {
            opt.save(dir)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bad = |reason: String| GradError::Checkpoint {
            path: path.clone(),
            reason,
        };
        let raw = fs::read(&path).map_err(|e| bad(e.to_string()))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&raw).map_err(|e| bad(format!("corrupt manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unknown format {}", manifest.format)));
        }
        let stored = ParameterStore::load(dir, "params")?;
        let mut model = GradModel::new(manifest.model, manifest.train.seed)?;
        model.params.load_from(&stored)?;
        let optimizer = if dir.join("adam_m.json").exists() {
            Some(AdamW::load(dir, manifest.train.optimizer())?)
        } else {
            None
        };
        Ok(Self {
            manifest,
            model,
            optimizer,
        })
    }

    /// The configuration that produced this checkpoint.
    pub fn run_config(&self) -> crate::train::RunConfig {
        crate::train::RunConfig {
            env: self.manifest.env.clone(),
            model: self.manifest.model,
            train: self.manifest.train,
            behavior: self.manifest.behavior,
        }
    }

    /// A trainer positioned right after the saved step.
    pub fn into_trainer(self) -> Result<Trainer> {
        let config = self.manifest.train;
        Ok(Trainer {
            model: self.model,
            optimizer: self
                .optimizer
                .unwrap_or_else(|| AdamW::new(config.optimizer())),
            config,
            step: self.manifest.step,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{generate_behavior_data, BehaviorConfig};

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            seq_len: 8,
            ..ModelConfig::desk()
        }
    }

    fn setup(train: TrainConfig) -> (Trainer, TrajectoryDataset) {
        let model = small_model();
        let train = TrainConfig {
            batch_size: 4,
            seq_len: 8,
            ..train
        };
        let env = EpisodeConfig::default();
        let b = BehaviorConfig {
            num_episodes: 4,
            ..BehaviorConfig::default()
        };
        let data = generate_behavior_data(&env, &b, 2).unwrap();
        let d = TrajectoryDataset::new(data, &model, &train).unwrap();
        (Trainer::new(model, train).unwrap(), d)
    }

    #[test]
    fn total_is_the_weighted_sum_every_step() {
        let (mut tr, d) = setup(TrainConfig {
            lambda_b: 0.3,
            lambda_d: 0.7,
            num_steps: 15,
            ..TrainConfig::desk()
        });
        for l in tr.fit(&d, |_, _| Ok(())).unwrap() {
            assert!((l.total - l.weighted_sum(0.3, 0.7)).abs() <= 1e-12, "{l:?}");
            assert!(l.value > 0.0 && l.balance > 0.0);
        }
    }

    #[test]
    fn behavior_cloning_total_is_policy_loss() {
        let (tr, d) = setup(TrainConfig::desk().behavior_cloning());
        let batch = sample_batch(&d, &tr.model.config, &tr.config, 0).unwrap();
        let l = tr.evaluate(&batch).unwrap();
        assert_eq!(l.total, l.policy);
        assert_eq!((l.value, l.balance, l.diversity), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_weights_leave_policy_plus_value() {
        let (mut tr, d) = setup(TrainConfig {
            lambda_b: 0.0,
            lambda_d: 0.0,
            ..TrainConfig::desk()
        });
        let batch = sample_batch(&d, &tr.model.config, &tr.config, 0).unwrap();
        let r = tr.train_step(&batch).unwrap();
        assert_eq!(r.losses.total, r.losses.policy + r.losses.value);
        assert!(r.losses.balance > 0.0);
        assert!(r.updated.iter().all(|p| !p.starts_with("moe.")));
    }

    #[test]
    fn disabled_heads_are_not_updated() {
        let (mut tr, d) = setup(TrainConfig::desk().behavior_cloning());
        let before = tr.model.params.clone();
        let batch = sample_batch(&d, &tr.model.config, &tr.config, 0).unwrap();
        let r = tr.train_step(&batch).unwrap();
        for (name, t) in tr.model.params.iter() {
            let head = name.starts_with("moe.") || name.starts_with("value.");
            assert_eq!(head, !r.updated.contains(name), "{name}");
            if head {
                assert_eq!(t, before.get(name).unwrap(), "{name}");
            }
        }
        let (mut full, d) = setup(TrainConfig::desk());
        let batch = sample_batch(&d, &full.model.config, &full.config, 0).unwrap();
        let r = full.train_step(&batch).unwrap();
        assert!(r.updated.contains("moe.router") && r.updated.contains("value.out.w"));
    }

    #[test]
    fn fixed_batch_loss_halves_within_100_steps() {
        let (mut tr, d) = setup(TrainConfig::desk());
        let batch = sample_batch(&d, &tr.model.config, &tr.config, 0).unwrap();
        let first = tr.train_step(&batch).unwrap().losses;
        for _ in 0..99 {
            tr.train_step(&batch).unwrap();
        }
        let last = tr.evaluate(&batch).unwrap();
        assert!(last.total <= 0.5 * first.total, "{first:?} -> {last:?}");
        assert!(last.policy <= 0.5 * first.policy, "{first:?} -> {last:?}");
    }

    #[test]
    fn non_finite_loss_names_the_component() {
        let (tr, d) = setup(TrainConfig::desk());
        let mut batch = sample_batch(&d, &tr.model.config, &tr.config, 0).unwrap();
        let last = batch.tokens.last_row(0);
        batch.tokens.value_targets[last] = f64::NAN;
        let err = tr.evaluate(&batch).unwrap_err();
        assert!(matches!(err, GradError::NonFiniteLoss { component: "value", .. }), "{err}");
    }
}

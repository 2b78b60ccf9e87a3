//! End-to-end training from a flat key-value config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::behavior::generate_behavior_data;
use super::config::{BehaviorConfig, TrainConfig};
use super::dataset::TrajectoryDataset;
use super::trainer::{Checkpoint, LossBreakdown, Trainer};
use crate::env::EpisodeConfig;
use crate::error::{GradError, Result};
use crate::model::ModelConfig;

/// Quantile of logged returns used as the rollout's initial return-to-go.
pub const TARGET_RETURN_QUANTILE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EpisodeConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub behavior: BehaviorConfig,
}

fn to_map<T: Serialize>(v: &T) -> Result<Map<String, Value>> {
    match serde_json::to_value(v)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("config structs serialize to objects"),
    }
}

fn from_map<T: for<'de> Deserialize<'de>>(m: Map<String, Value>) -> Result<T> {
    Ok(serde_json::from_value(Value::Object(m))?)
}

impl RunConfig {
    /// Parses a flat TOML file. Each key sets every field of that name in the
    /// environment, model (including the expert settings), training and
    /// behavior sections; unknown keys are rejected.
    pub fn from_flat_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| GradError::InvalidConfig(format!("config parse error: {e}")))?;
        let base = RunConfig::default();
        let mut env = to_map(&base.env)?;
        let mut model = to_map(&base.model)?;
        let mut moe = to_map(&base.model.moe)?;
        let mut train = to_map(&base.train)?;
        let mut behavior = to_map(&base.behavior)?;
        for (key, value) in table {
            let value = serde_json::to_value(value)?;
            let mut hit = false;
            for section in [&mut env, &mut model, &mut moe, &mut train, &mut behavior] {
                if key != "moe" && section.contains_key(&key) {
                    section.insert(key.clone(), value.clone());
                    hit = true;
                }
            }
            if !hit {
                return Err(GradError::InvalidConfig(format!("unknown config key {key}")));
            }
        }
        model.insert("moe".into(), Value::Object(moe));
        let run = Self {
            env: from_map(env)?,
            model: from_map(model)?,
            train: from_map(train)?,
            behavior: from_map(behavior)?,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.behavior.validate()?;
        if self.train.seq_len > self.model.seq_len {
            return Err(GradError::InvalidConfig(format!(
                "training window {} exceeds the model context {}",
                self.train.seq_len, self.model.seq_len
            )));
        }
        Ok(())
    }
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossBreakdown>,
}

/// Logs behavior data, builds the dataset and trains a fresh model.
///
/// With `out` set, writes `losses.csv`, the final checkpoint to
/// `out/checkpoint` and, if `checkpoint_every > 0`, intermediate ones to
/// `out/step-<n>`.
pub fn train_run(run: &RunConfig, out: Option<&Path>) -> Result<TrainedRun> {
    run.validate()?;
    let logged = generate_behavior_data(&run.env, &run.behavior, run.train.seed)?;
    let dataset = TrajectoryDataset::new(logged, &run.model, &run.train)?;
    let target = dataset.return_quantile(TARGET_RETURN_QUANTILE);
    let norm = dataset.normalizer.clone();
    let mut trainer = Trainer::new(run.model, run.train)?;
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join("losses.csv"))?)
        }
        None => None,
    };
    let every = run.train.checkpoint_every;
    let losses = trainer.fit(&dataset, |tr, l| {
        if let Some(w) = writer.as_mut() {
            w.serialize(l)?;
        }
        if let (Some(dir), true) = (out, every > 0 && tr.step as usize % every.max(1) == 0) {
            Checkpoint::from_trainer(tr, &run.env, &run.behavior, &norm, target)
                .save(&dir.join(format!("step-{}", tr.step)))?;
        }
        Ok(())
    })?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let checkpoint = Checkpoint::from_trainer(&trainer, &run.env, &run.behavior, &norm, target);
    if let Some(dir) = out {
        checkpoint.save(&dir.join("checkpoint"))?;
    }
    Ok(TrainedRun { checkpoint, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_reach_every_section() {
        let text = r#"
            budget = 120
            hidden_size = 32
            num_experts = 4
            seq_len = 10
            lambda_b = 0.5
            pid_kp = 0.3
            seed = 9
            value_distribution = { kind = "uniform", low = 0.0, high = 1.0 }
        "#;
        let c = RunConfig::from_flat_toml(text).unwrap();
        assert_eq!(c.env.budget, 120.0);
        assert_eq!(c.model.hidden_size, 32);
        assert_eq!(c.model.moe.num_experts, 4);
        assert_eq!((c.model.seq_len, c.train.seq_len), (10, 10));
        assert_eq!(c.train.lambda_b, 0.5);
        assert_eq!(c.behavior.pid_kp, 0.3);
        assert_eq!((c.env.seed, c.train.seed), (9, 9));
        assert!(matches!(
            c.env.value_distribution,
            crate::env::Distribution::Uniform { .. }
        ));
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(RunConfig::from_flat_toml("bogus = 1").is_err());
        assert!(RunConfig::from_flat_toml("budget = -1").is_err());
        assert!(RunConfig::from_flat_toml("moe = 1").is_err());
    }

    #[test]
    fn empty_config_is_the_desk_profile() {
        assert_eq!(RunConfig::from_flat_toml("").unwrap(), RunConfig::default());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};

/// Expert-head settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub lambda_aux: f64,
    pub perturb_low: f64,
    pub perturb_high: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 6,
            lambda_aux: 0.2,
            perturb_low: 0.8,
            perturb_high: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Context window in steps.
    pub seq_len: usize,
    /// Actions live in `(0, action_scale]`.
    pub action_scale: f64,
    /// Returns-to-go are divided by this before embedding.
    pub rtg_scale: f64,
    /// Width of the block feed-forward layer as a multiple of `hidden_size`.
    pub ffn_mult: usize,
    pub moe: MoeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small profile that trains in seconds on one CPU core.
    pub fn desk() -> Self {
        Self {
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            seq_len: 20,
            action_scale: 10.0,
            rtg_scale: 500.0,
            ffn_mult: 1,
            moe: MoeConfig::default(),
        }
    }

    pub fn large() -> Self {
        Self {
            hidden_size: 512,
            num_layers: 8,
            num_heads: 16,
            seq_len: 20,
            action_scale: 500.0,
            rtg_scale: 2000.0,
            ffn_mult: 4,
            moe: MoeConfig::default(),
        }
    }

    /// Width of each of the four embedding components.
    pub fn component_width(&self) -> usize {
        self.hidden_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GradError::InvalidConfig(m));
        if self.hidden_size == 0 || self.hidden_size % 4 != 0 {
            return bad(format!(
                "hidden_size {} must be a positive multiple of 4",
                self.hidden_size
            ));
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.seq_len == 0 || self.num_layers == 0 || self.ffn_mult == 0 {
            return bad("seq_len, num_layers and ffn_mult must be positive".into());
        }
        if !(self.action_scale > 0.0 && self.rtg_scale > 0.0) {
            return bad("action_scale and rtg_scale must be positive".into());
        }
        let m = &self.moe;
        if m.num_experts == 0 {
            return bad("num_experts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&m.lambda_aux) {
            return bad(format!("lambda_aux {} outside [0, 1]", m.lambda_aux));
        }
        if !(0.0 < m.perturb_low && m.perturb_low < m.perturb_high) {
            return bad("perturbation range must satisfy 0 < low < high".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::large().validate().unwrap();
        let p = ModelConfig::large();
        assert_eq!((p.hidden_size, p.num_layers, p.num_heads, p.seq_len), (512, 8, 16, 20));
    }

    #[test]
    fn head_divisibility_enforced() {
        let c = ModelConfig {
            num_heads: 3,
            ..ModelConfig::desk()
        };
        assert!(c.validate().is_err());
    }
}

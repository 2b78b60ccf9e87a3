use serde::{Deserialize, Serialize};

use crate::env::{Trajectory, STATE_DIM};
use crate::error::{GradError, Result};

/// Standard deviations below this are replaced by 1.
const MIN_STD: f64 = 1e-6;

/// Input scaling shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: [f64; STATE_DIM],
    pub state_std: [f64; STATE_DIM],
    pub rtg_scale: f64,
    pub action_scale: f64,
}

impl Normalizer {
    pub fn identity(rtg_scale: f64, action_scale: f64) -> Self {
        Self {
            state_mean: [0.0; STATE_DIM],
            state_std: [1.0; STATE_DIM],
            rtg_scale,
            action_scale,
        }
    }

    /// Per-feature mean and standard deviation over every logged step.
    pub fn fit(trajectories: &[Trajectory], rtg_scale: f64, action_scale: f64) -> Result<Self> {
        let n: usize = trajectories.iter().map(|t| t.steps.len()).sum();
        if n == 0 {
            return Err(GradError::Empty("trajectory dataset"));
        }
        let mut mean = [0.0; STATE_DIM];
        for step in trajectories.iter().flat_map(|t| &t.steps) {
            for (m, x) in mean.iter_mut().zip(&step.state) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = [0.0; STATE_DIM];
        for step in trajectories.iter().flat_map(|t| &t.steps) {
            for ((v, x), m) in var.iter_mut().zip(&step.state).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mut std = [1.0; STATE_DIM];
        for (s, v) in std.iter_mut().zip(&var) {
            let sd = (v / n as f64).sqrt();
            if sd >= MIN_STD {
                *s = sd;
            }
        }
        Ok(Self {
            state_mean: mean,
            state_std: std,
            rtg_scale,
            action_scale,
        })
    }

    pub fn state(&self, s: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            out[i] = (s[i] - self.state_mean[i]) / self.state_std[i];
        }
        out
    }

    pub fn rtg(&self, g: f64) -> f64 {
        g / self.rtg_scale
    }

    pub fn action(&self, a: f64) -> f64 {
        a / self.action_scale
    }
}

/// One timestep as fed to the model, in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenInput {
    pub rtg: f64,
    pub state: [f64; STATE_DIM],
    /// Action taken at the previous step (0 at episode start).
    pub prev_action: f64,
}

/// A `[batch, seq]` grid of tokens, row-major by sequence. Short windows are
/// left-padded: a window of length `L` fills slots `seq-L .. seq`, and the
/// positional embedding is indexed by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    /// Normalized return-to-go per row.
    pub rtg: Vec<f64>,
    /// Normalized states, `STATE_DIM` per row.
    pub states: Vec<f64>,
    /// Previous action per row, raw units.
    pub prev_actions: Vec<f64>,
    /// Target action per row, raw units (0 on padding).
    pub actions: Vec<f64>,
    /// Value-head regression target per row.
    pub value_targets: Vec<f64>,
    /// Per-row weight of the value loss (1 unless a ramp is used).
    pub value_weights: Vec<f64>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize) -> Self {
        let rows = batch * seq;
        Self {
            batch,
            seq,
            rtg: vec![0.0; rows],
            states: vec![0.0; rows * STATE_DIM],
            prev_actions: vec![0.0; rows],
            actions: vec![0.0; rows],
            value_targets: vec![0.0; rows],
            value_weights: vec![0.0; rows],
            mask: vec![false; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Writes `window` (oldest first) into sequence `b`, left-padded.
    pub fn set_window(&mut self, b: usize, window: &[TokenInput], norm: &Normalizer) -> Result<()> {
        if window.len() > self.seq {
            return Err(GradError::SequenceTooLong {
                len: window.len(),
                max: self.seq,
            });
        }
        if b >= self.batch {
            return Err(GradError::LengthMismatch {
                left: b,
                right: self.batch,
            });
        }
        let start = self.seq - window.len();
        for (k, tok) in window.iter().enumerate() {
            if !tok.rtg.is_finite() {
                return Err(GradError::InvalidConfig(format!(
                    "non-finite return-to-go {}",
                    tok.rtg
                )));
            }
            let row = b * self.seq + start + k;
            self.rtg[row] = norm.rtg(tok.rtg);
            self.states[row * STATE_DIM..(row + 1) * STATE_DIM]
                .copy_from_slice(&norm.state(&tok.state));
            self.prev_actions[row] = tok.prev_action;
            self.mask[row] = true;
            self.value_weights[row] = 1.0;
        }
        Ok(())
    }

    /// A single-sequence batch.
    pub fn single(window: &[TokenInput], seq: usize, norm: &Normalizer) -> Result<Self> {
        let mut b = Self::new(1, seq);
        b.set_window(0, window, norm)?;
        Ok(b)
    }

    /// Row index of the last slot of sequence `b`.
    pub fn last_row(&self, b: usize) -> usize {
        b * self.seq + self.seq - 1
    }
}

use rand::Rng;

use super::batch::{Normalizer, TokenBatch, TokenInput};
use super::config::ModelConfig;
use super::moe::{argmax, clamp_action, CandidateActionSet, RoutingDecision, ACTION_FLOOR};
use crate::diff::{AttentionLayout, Axis, Graph, NodeId, ParameterStore, Tensor};
use crate::env::STATE_DIM;
use crate::error::{GradError, Result};
use crate::rng::mix_seed;

/// Causal transformer with policy, value and expert heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GradModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

/// What to build on top of the backbone.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub value_head: bool,
    /// Feed the value head a detached copy of the hidden states.
    pub value_stop_grad: bool,
    /// Candidate factors, `num_experts` per row, enabling the expert head.
    pub candidate_factors: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct MoeNodes {
    /// Routing probabilities `[rows, M]`.
    pub probs: NodeId,
    /// Chosen expert per row.
    pub chosen: Vec<usize>,
    pub shared: NodeId,
    pub routed: NodeId,
    pub fused: NodeId,
    /// Residual `U`, `[rows, 1]`.
    pub residual: NodeId,
    /// Mixture weights `[1, M]`.
    pub omega: NodeId,
    /// Candidates `[rows, M]` (constant).
    pub candidates: NodeId,
    /// Per-candidate refined actions `[rows, M]`, clamped.
    pub refined: NodeId,
    /// Aggregate exploratory action `[rows, 1]`, clamped.
    pub aggregate: NodeId,
}

#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// Hidden states after the embedding (index 0) and after each block.
    pub levels: Vec<NodeId>,
    /// Final normalized hidden states `[rows, hidden]`.
    pub hidden: NodeId,
    /// Predicted actions `[rows, 1]`.
    pub actions: NodeId,
    pub values: Option<NodeId>,
    pub moe: Option<MoeNodes>,
}

fn ffn(g: &mut Graph, p: &ParameterStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, p, &format!("{prefix}.up"), x)?;
    let h = g.relu(h);
    linear(g, p, &format!("{prefix}.down"), h)
}

fn linear(g: &mut Graph, p: &ParameterStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let b = g.param(p, &format!("{prefix}.b"))?;
    g.linear(w, b, x)
}

fn layernorm_affine(g: &mut Graph, p: &ParameterStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let n = g.layernorm(x);
    let gamma = g.param(p, &format!("{prefix}.gamma"))?;
    let beta = g.param(p, &format!("{prefix}.beta"))?;
    let y = g.mul_row(n, gamma)?;
    g.add_row(y, beta)
}

impl GradModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParameterStore::new(mix_seed(seed, crate::rng::streams::MODEL_INIT));
        let h = config.hidden_size;
        let q = config.component_width();
        let ff = h * config.ffn_mult;
        p.init_linear("embed.rtg", 1, q)?;
        p.init_linear("embed.state", STATE_DIM, q)?;
        p.init_linear("embed.action", 1, q)?;
        p.init_uniform("embed.pos", config.seq_len, q, 1.0 / (q as f64).sqrt())?;
        for n in 0..config.num_layers {
            let b = format!("blocks.{n}");
            for ln in ["ln1", "ln2"] {
                p.init_const(&format!("{b}.{ln}.gamma"), 1, h, 1.0)?;
                p.init_const(&format!("{b}.{ln}.beta"), 1, h, 0.0)?;
            }
            for proj in ["q", "k", "v", "o"] {
                p.init_linear(&format!("{b}.attn.{proj}"), h, h)?;
            }
            p.init_linear(&format!("{b}.ffn.up"), h, ff)?;
            p.init_linear(&format!("{b}.ffn.down"), ff, h)?;
        }
        p.init_const("ln_f.gamma", 1, h, 1.0)?;
        p.init_const("ln_f.beta", 1, h, 0.0)?;
        for head in ["policy", "value"] {
            p.init_linear(&format!("{head}.hidden"), h, h)?;
            p.init_linear(&format!("{head}.out"), h, 1)?;
        }
        let m = config.moe.num_experts;
        p.init_weight("moe.router", h, m)?;
        p.init_linear("moe.shared.up", h, h)?;
        p.init_linear("moe.shared.down", h, h)?;
        for e in 0..m {
            p.init_linear(&format!("moe.experts.{e}.up"), h, h)?;
            p.init_linear(&format!("moe.experts.{e}.down"), h, h)?;
        }
        p.init_linear("moe.residual.hidden", h, h)?;
        p.init_linear("moe.residual.out", h, 1)?;
        p.init_const("moe.omega", 1, m, 0.0)?;
        Ok(Self { config, params: p })
    }

    /// Level-0 hidden states: `LayerNorm(E_g(g) ++ E_s(s) ++ E_a(a) ++ PE(slot))`.
    pub fn embed(&self, g: &mut Graph, batch: &TokenBatch) -> Result<NodeId> {
        if batch.seq > self.config.seq_len {
            return Err(GradError::SequenceTooLong {
                len: batch.seq,
                max: self.config.seq_len,
            });
        }
        let rows = batch.rows();
        let p = &self.params;
        let rtg = g.constant(Tensor::column(&batch.rtg));
        let states = g.constant(Tensor::from_vec(rows, STATE_DIM, batch.states.clone())?);
        let prev: Vec<f64> = batch
            .prev_actions
            .iter()
            .map(|a| a / self.config.action_scale)
            .collect();
        let prev = g.constant(Tensor::column(&prev));
        let eg = linear(g, p, "embed.rtg", rtg)?;
        let es = linear(g, p, "embed.state", states)?;
        let ea = linear(g, p, "embed.action", prev)?;
        let table = g.param(p, "embed.pos")?;
        let offset = self.config.seq_len - batch.seq;
        let slots: Vec<usize> = (0..rows).map(|r| offset + r % batch.seq).collect();
        let pe = g.gather_rows(table, &slots)?;
        let x = g.concat(&[eg, es, ea, pe])?;
        Ok(g.layernorm(x))
    }

    fn block(&self, g: &mut Graph, n: usize, x: NodeId, batch: &TokenBatch) -> Result<NodeId> {
        let p = &self.params;
        let pre = format!("blocks.{n}");
        let xn = layernorm_affine(g, p, &format!("{pre}.ln1"), x)?;
        let q = linear(g, p, &format!("{pre}.attn.q"), xn)?;
        let k = linear(g, p, &format!("{pre}.attn.k"), xn)?;
        let v = linear(g, p, &format!("{pre}.attn.v"), xn)?;
        let layout = AttentionLayout {
            batch: batch.batch,
            seq: batch.seq,
            heads: self.config.num_heads,
        };
        let att = g.causal_attention(q, k, v, layout, &batch.mask)?;
        let att = linear(g, p, &format!("{pre}.attn.o"), att)?;
        let x = g.add(x, att)?;
        let xn = layernorm_affine(g, p, &format!("{pre}.ln2"), x)?;
        let f = ffn(g, p, &format!("{pre}.ffn"), xn)?;
        g.add(x, f)
    }

    /// `scale * (tanh(z) + 1) / 2`, kept strictly inside `(0, scale)`.
    fn squash(&self, g: &mut Graph, logits: NodeId) -> NodeId {
        let s = self.config.action_scale;
        let t = g.tanh(logits);
        let a = g.scale(t, s / 2.0);
        let rows = g.shape(a)[0];
        let offset = g.constant(Tensor::filled(rows, 1, s / 2.0));
        let a = g.add(a, offset).expect("same shape");
        g.clamp(a, ACTION_FLOOR * s, s * (1.0 - ACTION_FLOOR))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        opts: &ForwardOptions<'_>,
    ) -> Result<ForwardNodes> {
        let p = &self.params;
        let mut x = self.embed(g, batch)?;
        let mut levels = vec![x];
        for n in 0..self.config.num_layers {
            x = self.block(g, n, x, batch)?;
            levels.push(x);
        }
        let hidden = layernorm_affine(g, p, "ln_f", x)?;

        let ph = linear(g, p, "policy.hidden", hidden)?;
        let ph = g.relu(ph);
        let logits = linear(g, p, "policy.out", ph)?;
        let actions = self.squash(g, logits);

        let values = if opts.value_head {
            let src = if opts.value_stop_grad {
                g.detach(hidden)
            } else {
                hidden
            };
            Some(self.value_head(g, src)?)
        } else {
            None
        };

        let moe = match opts.candidate_factors {
            Some(f) => Some(self.expert_head(g, hidden, batch, f)?),
            None => None,
        };
        Ok(ForwardNodes {
            levels,
            hidden,
            actions,
            values,
            moe,
        })
    }

    /// Two-layer MLP to a scalar per row.
    pub fn value_head(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let v = linear(g, p, "value.hidden", h)?;
        let v = g.relu(v);
        linear(g, p, "value.out", v)
    }

    fn expert_head(
        &self,
        g: &mut Graph,
        hidden: NodeId,
        batch: &TokenBatch,
        factors: &[f64],
    ) -> Result<MoeNodes> {
        let p = &self.params;
        let m = self.config.moe.num_experts;
        let rows = batch.rows();
        if factors.len() != rows * m {
            return Err(GradError::LengthMismatch {
                left: factors.len(),
                right: rows * m,
            });
        }
        let router = g.param(p, "moe.router")?;
        let logits = g.matmul(hidden, router)?;
        let probs = g.softmax(logits, Axis::Cols);
        let chosen: Vec<usize> = {
            let pv = g.value(probs);
            (0..rows).map(|r| argmax(pv.row_slice(r))).collect()
        };

        let shared = ffn(g, p, "moe.shared", hidden)?;
        let h = self.config.hidden_size;
        let mut routed = None;
        for e in 0..m {
            let idx: Vec<usize> = (0..rows)
                .filter(|&r| batch.mask[r] && chosen[r] == e)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let xe = g.gather_rows(hidden, &idx)?;
            let ye = ffn(g, p, &format!("moe.experts.{e}"), xe)?;
            let full = g.scatter_rows(ye, &idx, rows)?;
            routed = Some(match routed {
                None => full,
                Some(acc) => g.add(acc, full)?,
            });
        }
        let routed = match routed {
            Some(r) => r,
            None => g.constant(Tensor::zeros(rows, h)),
        };
        let sum = g.add(shared, routed)?;
        let fused = g.layernorm(sum);

        let u = linear(g, p, "moe.residual.hidden", fused)?;
        let u = g.relu(u);
        let residual = linear(g, p, "moe.residual.out", u)?;

        let omega_logits = g.param(p, "moe.omega")?;
        let omega = g.softmax(omega_logits, Axis::Cols);
        let cand: Vec<f64> = (0..rows)
            .flat_map(|r| {
                let a = batch.prev_actions[r];
                factors[r * m..(r + 1) * m].iter().map(move |f| a * f)
            })
            .collect();
        let candidates = g.constant(Tensor::from_vec(rows, m, cand)?);
        let weighted = g.mul_row(candidates, omega)?;
        let s = self.config.action_scale;
        let refined = g.add_col(weighted, residual)?;
        let refined = g.clamp(refined, ACTION_FLOOR * s, s);
        let mixed = g.row_sum(weighted);
        let aggregate = g.add(mixed, residual)?;
        let aggregate = g.clamp(aggregate, ACTION_FLOOR * s, s);
        Ok(MoeNodes {
            probs,
            chosen,
            shared,
            routed,
            fused,
            residual,
            omega,
            candidates,
            refined,
            aggregate,
        })
    }

    /// Routing decisions of the valid rows of a forward pass.
    pub fn routing_decisions(g: &Graph, moe: &MoeNodes, mask: &[bool]) -> Vec<RoutingDecision> {
        let pv = g.value(moe.probs);
        (0..pv.rows())
            .filter(|&r| mask[r])
            .map(|r| RoutingDecision::from_probabilities(pv.row_slice(r).to_vec()))
            .collect()
    }

    fn window_batch(&self, window: &[TokenInput], norm: &Normalizer) -> Result<TokenBatch> {
        TokenBatch::single(window, self.config.seq_len, norm)
    }

    /// Action for the last token of `window` (the most recent step).
    pub fn predict(&self, window: &[TokenInput], norm: &Normalizer) -> Result<f64> {
        let batch = self.window_batch(window, norm)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &batch, &ForwardOptions::default())?;
        Ok(g.value(out.actions).data()[batch.last_row(0)])
    }

    /// Exploratory action `U + sum_m omega_m a_m` for the last token, with
    /// fresh candidate factors drawn from `rng`.
    pub fn explore<R: Rng + ?Sized>(
        &self,
        window: &[TokenInput],
        norm: &Normalizer,
        rng: &mut R,
    ) -> Result<f64> {
        let batch = self.window_batch(window, norm)?;
        let moe = &self.config.moe;
        let factors: Vec<f64> = (0..batch.rows() * moe.num_experts)
            .map(|_| rng.gen_range(moe.perturb_low..moe.perturb_high))
            .collect();
        let mut g = Graph::new();
        let opts = ForwardOptions {
            candidate_factors: Some(&factors),
            ..ForwardOptions::default()
        };
        let out = self.forward(&mut g, &batch, &opts)?;
        let moe = out.moe.expect("expert head requested");
        let a = g.value(moe.aggregate).data()[batch.last_row(0)];
        Ok(clamp_action(a, self.config.action_scale))
    }

    /// Value-head output after replacing the last token's previous action
    /// with each candidate.
    pub fn score_candidates(
        &self,
        window: &[TokenInput],
        candidates: &CandidateActionSet,
        norm: &Normalizer,
    ) -> Result<Vec<f64>> {
        let last = window.len().checked_sub(1).ok_or(GradError::Empty("window"))?;
        let n = candidates.candidates.len();
        let mut batch = TokenBatch::new(n, self.config.seq_len);
        let mut w = window.to_vec();
        for (i, &c) in candidates.candidates.iter().enumerate() {
            w[last].prev_action = c;
            batch.set_window(i, &w, norm)?;
        }
        let mut g = Graph::new();
        let opts = ForwardOptions {
            value_head: true,
            ..ForwardOptions::default()
        };
        let out = self.forward(&mut g, &batch, &opts)?;
        let v = g.value(out.values.expect("value head requested"));
        Ok((0..n).map(|i| v.data()[batch.last_row(i)]).collect())
    }
}

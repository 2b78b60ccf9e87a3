use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{check_parameter_gradients, layernorm_rows, Graph, Tensor};
use crate::env::STATE_DIM;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        num_layers: 1,
        num_heads: 2,
        seq_len: 3,
        action_scale: 4.0,
        rtg_scale: 10.0,
        ffn_mult: 1,
        moe: MoeConfig {
            num_experts: 2,
            ..MoeConfig::default()
        },
    }
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, seq: usize, pad: usize) -> TokenBatch {
    let norm = Normalizer::identity(1.0, 1.0);
    let mut b = TokenBatch::new(batch, seq);
    for i in 0..batch {
        let len = seq - pad.min(seq - 1);
        let w: Vec<TokenInput> = (0..len)
            .map(|_| TokenInput {
                rtg: rng.gen_range(-1.0..1.0),
                state: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
                prev_action: rng.gen_range(0.1..3.0),
            })
            .collect();
        b.set_window(i, &w, &norm).unwrap();
        for r in 0..seq {
            let row = i * seq + r;
            b.actions[row] = rng.gen_range(0.1..3.0);
            b.value_targets[row] = rng.gen_range(-1.0..1.0);
        }
    }
    b
}

fn factors(rng: &mut ChaCha8Rng, rows: usize, m: usize) -> Vec<f64> {
    (0..rows * m).map(|_| rng.gen_range(0.8..1.2)).collect()
}

#[test]
fn embedding_width_and_normalization() {
    let cfg = ModelConfig::desk();
    let model = GradModel::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random_batch(&mut rng, 2, 20, 0);
    let mut g = Graph::new();
    let h0 = model.embed(&mut g, &b).unwrap();
    let v = g.value(h0);
    assert_eq!(v.shape(), [40, 64]);
    // Recompute the pre-normalization variance to get the exact expected
    // post-normalization variance var / (var + eps).
    for r in 0..v.rows() {
        let row = v.row_slice(r);
        let mean = row.iter().sum::<f64>() / 64.0;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert!(var <= 1.0 && var > 1.0 - 1e-3, "{var}");
    }
}

#[test]
fn first_token_uses_zero_previous_action() {
    let norm = Normalizer::identity(1.0, 1.0);
    let tok = TokenInput {
        rtg: 1.0,
        state: [0.5; STATE_DIM],
        prev_action: 0.0,
    };
    let b = TokenBatch::single(&[tok], 20, &norm).unwrap();
    assert_eq!(b.prev_actions[19], 0.0);
}

#[test]
fn actions_are_strictly_inside_scale() {
    let cfg = ModelConfig::desk();
    let model = GradModel::new(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = random_batch(&mut rng, 2, 20, 0);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &b, &ForwardOptions::default()).unwrap();
    let a = g.value(out.actions);
    assert!(a.data().iter().all(|&x| x > 0.0 && x < cfg.action_scale));
    for &l in &out.levels {
        assert!(g.value(l).is_finite());
    }
}

#[test]
fn future_tokens_do_not_change_past_actions() {
    let cfg = ModelConfig::desk();
    let model = GradModel::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let b = random_batch(&mut rng, 1, 20, 0);
        let t = rng.gen_range(0..19);
        let mut p = b.clone();
        for r in t + 1..20 {
            p.rtg[r] += rng.gen_range(-5.0..5.0);
            p.prev_actions[r] *= 3.0;
            for j in 0..STATE_DIM {
                p.states[r * STATE_DIM + j] = rng.gen_range(-9.0..9.0);
            }
        }
        let run = |batch: &TokenBatch| {
            let mut g = Graph::new();
            let o = model.forward(&mut g, batch, &ForwardOptions::default()).unwrap();
            g.value(o.actions).data().to_vec()
        };
        let (a, b2) = (run(&b), run(&p));
        assert_eq!(a[..=t], b2[..=t]);
        assert_ne!(a[t + 1..], b2[t + 1..]);
    }
}

#[test]
fn zero_hidden_gives_zero_value() {
    let model = GradModel::new(ModelConfig::desk(), 4).unwrap();
    let mut g = Graph::new();
    let h = g.input(Tensor::zeros(3, 64));
    let v = model.value_head(&mut g, h).unwrap();
    assert!(g.value(v).data().iter().all(|&x| x == 0.0));
}

#[test]
fn one_block_model_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let model = GradModel::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = random_batch(&mut rng, 2, 3, 1);
    let f = factors(&mut rng, b.rows(), 2);
    // The diversity term treats the nominal actions as constants, so they
    // are fixed from the unperturbed model.
    let nominal = {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &b, &ForwardOptions::default()).unwrap();
        g.value(out.actions).data().to_vec()
    };
    let err = check_parameter_gradients(&model.params, 1e-6, |g, store| {
        let m = GradModel {
            config: cfg,
            params: store.clone(),
        };
        let opts = ForwardOptions {
            value_head: true,
            value_stop_grad: false,
            candidate_factors: Some(&f),
        };
        let out = m.forward(g, &b, &opts)?;
        let pl = weighted_mse(g, out.actions, &b.actions, &b.value_weights)?;
        let vl = weighted_mse(g, out.values.unwrap(), &b.value_targets, &b.value_weights)?;
        let moe = out.moe.unwrap();
        let bl = balance_loss_node(g, &moe, out.hidden, &b.mask, 0.2)?;
        let dl = diversity_loss_node(g, moe.refined, &nominal, &b.mask, b.seq)?;
        let s = g.add(pl, vl)?;
        let bl = g.scale(bl, 0.1);
        let dl = g.scale(dl, 0.1);
        let s = g.add(s, bl)?;
        g.add(s, dl)
    })
    .unwrap();
    assert!(err < 1e-3, "composite gradient error {err}");
}

#[test]
fn fused_is_layernorm_of_shared_plus_routed() {
    let cfg = tiny_config();
    let model = GradModel::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b = random_batch(&mut rng, 2, 3, 0);
    let f = factors(&mut rng, b.rows(), 2);
    let mut g = Graph::new();
    let opts = ForwardOptions {
        candidate_factors: Some(&f),
        ..ForwardOptions::default()
    };
    let out = model.forward(&mut g, &b, &opts).unwrap();
    let moe = out.moe.unwrap();
    let mut sum = g.value(moe.shared).clone();
    sum.add_assign(g.value(moe.routed));
    let (expected, _) = layernorm_rows(&sum);
    assert_eq!(&expected, g.value(moe.fused));

    // The routed output of each row is exactly its chosen expert's FFN.
    let h = g.value(out.hidden).clone();
    for r in 0..b.rows() {
        let mut g2 = Graph::new();
        let x = g2.input(Tensor::row(h.row_slice(r)));
        let e = moe.chosen[r];
        let up_w = g2.param(&model.params, &format!("moe.experts.{e}.up.w")).unwrap();
        let up_b = g2.param(&model.params, &format!("moe.experts.{e}.up.b")).unwrap();
        let y = g2.linear(up_w, up_b, x).unwrap();
        let y = g2.relu(y);
        let dw = g2.param(&model.params, &format!("moe.experts.{e}.down.w")).unwrap();
        let db = g2.param(&model.params, &format!("moe.experts.{e}.down.b")).unwrap();
        let y = g2.linear(dw, db, y).unwrap();
        assert_eq!(g2.value(y).data(), g.value(moe.routed).row_slice(r));
    }
}

#[test]
fn unchosen_expert_gets_no_gradient() {
    let cfg = tiny_config();
    let model = GradModel::new(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for _ in 0..50 {
        // One valid token per probe.
        let b = random_batch(&mut rng, 1, 3, 2);
        let f = factors(&mut rng, b.rows(), 2);
        let mut g = Graph::new();
        let opts = ForwardOptions {
            candidate_factors: Some(&f),
            ..ForwardOptions::default()
        };
        let out = model.forward(&mut g, &b, &opts).unwrap();
        let moe = out.moe.unwrap();
        let bl = balance_loss_node(&mut g, &moe, out.hidden, &b.mask, 0.2).unwrap();
        let nominal = g.value(out.actions).data().to_vec();
        let dl = diversity_loss_node(&mut g, moe.refined, &nominal, &b.mask, b.seq).unwrap();
        let loss = g.add(bl, dl).unwrap();
        g.backward(loss).unwrap();
        let chosen = moe.chosen[2];
        let other = 1 - chosen;
        for part in ["up.w", "up.b", "down.w", "down.b"] {
            let name = format!("moe.experts.{other}.{part}");
            if let Some(&id) = g.params().get(&name) {
                assert!(g.grad_or_zeros(id).data().iter().all(|&x| x == 0.0));
            }
            let name = format!("moe.experts.{chosen}.{part}");
            assert!(g.params().contains_key(&name));
        }
        checked += 1;
    }
    assert_eq!(checked, 50);
}

#[test]
fn routing_decisions_are_one_hot() {
    let cfg = ModelConfig::desk();
    let model = GradModel::new(cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = random_batch(&mut rng, 4, 20, 0);
    let f = factors(&mut rng, b.rows(), cfg.moe.num_experts);
    let mut g = Graph::new();
    let opts = ForwardOptions {
        candidate_factors: Some(&f),
        ..ForwardOptions::default()
    };
    let out = model.forward(&mut g, &b, &opts).unwrap();
    let moe = out.moe.unwrap();
    let d = GradModel::routing_decisions(&g, &moe, &b.mask);
    assert_eq!(d.len(), 80);
    assert!(d.iter().all(RoutingDecision::is_well_formed));
    let refined = g.value(moe.refined);
    assert!(refined.data().iter().all(|&x| x > 0.0 && x <= cfg.action_scale));
}

#[test]
fn candidate_scores() {
    let cfg = ModelConfig::desk();
    let model = GradModel::new(cfg, 9).unwrap();
    let norm = Normalizer::identity(cfg.rtg_scale, cfg.action_scale);
    let w = vec![
        TokenInput {
            rtg: 100.0,
            state: [0.3; STATE_DIM],
            prev_action: 1.0,
        };
        4
    ];
    let same = CandidateActionSet {
        candidates: vec![1.5; 3],
        factors: vec![1.0; 3],
    };
    let s = model.score_candidates(&w, &same, &norm).unwrap();
    assert_eq!(s[0], s[1]);
    assert_eq!(s[1], s[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = moe::perturb_candidates(1.0, 6, 0.8, 1.2, &mut rng).unwrap();
    let s = model.score_candidates(&w, &c, &norm).unwrap();
    assert_eq!(s.len(), 6);
    assert!(s.iter().all(|x| x.is_finite()));
    let shifted: Vec<f64> = s.iter().map(|x| x + 3.0).collect();
    assert_eq!(moe::argmax(&s), moe::argmax(&shifted));
}

#[test]
fn identical_seeds_identical_models() {
    let a = GradModel::new(ModelConfig::desk(), 11).unwrap();
    let b = GradModel::new(ModelConfig::desk(), 11).unwrap();
    let c = GradModel::new(ModelConfig::desk(), 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
}

#[test]
fn explore_action_in_range() {
    let cfg = ModelConfig::desk();
    let model = GradModel::new(cfg, 13).unwrap();
    let norm = Normalizer::identity(cfg.rtg_scale, cfg.action_scale);
    let w = vec![
        TokenInput {
            rtg: 100.0,
            state: [0.3; STATE_DIM],
            prev_action: 1.0,
        };
        3
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = model.explore(&w, &norm, &mut rng).unwrap();
    assert!(a > 0.0 && a <= cfg.action_scale);
}


use grad_core::env::*;
use grad_core::oracle::{fractional_upper_bound, BiddingInstance};
use proptest::prelude::*;

fn random_walk(seed: u64) -> impl FnMut(&StepState, &[TrajectoryStep]) -> f64 {
    let mut x = seed as f64 * 0.37;
    move |_, _| {
        x = (x * 1.7 + 0.3) % 6.0;
        x
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn budget_is_never_exceeded(seed in 0u64..10_000, budget in 1.0f64..800.0, coef in 0.0f64..20.0) {
        let cfg = EpisodeConfig { budget, seed, ..EpisodeConfig::default() };
        for r in [
            run_episode(&mut ConstantPolicy(coef), &cfg).unwrap(),
            run_episode(&mut random_walk(seed), &cfg).unwrap(),
        ] {
            prop_assert!(r.total_cost <= budget);
            let paid: f64 = r.outcomes.iter().map(|o| o.cost).sum();
            prop_assert!((paid - r.total_cost).abs() < 1e-9);
            prop_assert_eq!(r.per_step_rewards.len(), cfg.num_steps);
            prop_assert!(r.trajectory.rtg_telescopes());
            for (o, opp) in r.outcomes.iter().zip(&r.opportunities) {
                // Second price, and clicks only on wins.
                prop_assert!(!o.won || o.cost == opp.competitor_bid);
                prop_assert!(o.won || (!o.clicked && o.cost == 0.0));
            }
        }
    }

    #[test]
    fn states_are_well_formed(seed in 0u64..10_000, coef in 0.0f64..10.0) {
        let cfg = EpisodeConfig { seed, ..EpisodeConfig::default() };
        let mut ok = true;
        let mut policy = |s: &StepState, _: &[TrajectoryStep]| {
            ok &= s.is_well_formed();
            coef
        };
        run_episode(&mut policy, &cfg).unwrap();
        prop_assert!(ok);
    }

    #[test]
    fn hindsight_bound_dominates(seed in 0u64..10_000, coef in 0.0f64..10.0) {
        let cfg = EpisodeConfig { seed, ..EpisodeConfig::default() };
        let r = run_episode(&mut ConstantPolicy(coef), &cfg).unwrap();
        let inst = BiddingInstance::from_opportunities(&r.opportunities, cfg.budget, None);
        prop_assert!(fractional_upper_bound(&inst).unwrap() >= r.total_value - 1e-9);
    }
}

#[test]
fn opportunities_do_not_depend_on_the_policy() {
    let cfg = EpisodeConfig { seed: 5, ..EpisodeConfig::default() };
    let a = run_episode(&mut ConstantPolicy(0.5), &cfg).unwrap();
    let b = run_episode(&mut ConstantPolicy(3.0), &cfg).unwrap();
    assert_eq!(a.opportunities, b.opportunities);
    assert!(b.total_value > a.total_value);
}

#[test]
fn episodes_are_reproducible() {
    let cfg = EpisodeConfig { seed: 11, ..EpisodeConfig::default() };
    let a = run_episode(&mut random_walk(1), &cfg).unwrap();
    let b = run_episode(&mut random_walk(1), &cfg).unwrap();
    assert_eq!(a, b);
    let c = run_episode(&mut random_walk(1), &cfg.with_seed(12)).unwrap();
    assert_ne!(a.opportunities, c.opportunities);
}

#[test]
fn prices_sit_on_the_grid() {
    let cfg = EpisodeConfig { seed: 2, ..EpisodeConfig::default() };
    for o in sample_episode_opportunities(&cfg).unwrap() {
        for x in [o.value, o.competitor_bid] {
            let k = x / PRICE_RESOLUTION;
            assert_eq!(k, k.round());
        }
    }
}

#[test]
fn trajectories_round_trip_through_jsonl() {
    let cfg = EpisodeConfig { seed: 3, ..EpisodeConfig::default() };
    let t = run_episode(&mut ConstantPolicy(1.0), &cfg).unwrap().trajectory;
    let mut buf = Vec::new();
    write_trajectories(&mut buf, &[t.clone(), t.clone()]).unwrap();
    let back = read_trajectories(&buf[..]).unwrap();
    assert_eq!(back, vec![t.clone(), t]);
}

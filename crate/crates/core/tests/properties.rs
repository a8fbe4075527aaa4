mod common;

use std::sync::Arc;

use common::{all_radial_configurations, random_configuration};
use dnr_core::agents::{evaluate_weekly_cost, ActorPolicy, BcsacModel, ControllerPolicy, Policy, ReplayPolicy, SharedHyper, AgentHyper, StayPolicy};
use dnr_core::behavior_data::{behavior_distribution, draw_behavior_action, generate_dataset, DatasetSpec, ScenarioProbs};
use dnr_core::cvae::{CvaeHyper, CvaeModel};
use dnr_core::env::{DnrAction, DnrEnv, RewardParams, Scenario, HOURS_PER_WEEK};
use dnr_core::grid::{solve_power_flow, total_losses, voltage_violation, Network};
use dnr_core::seeded_rng;
use dnr_core::topology::{apply_pair, count_radial_configurations, is_radial, switch_pair_mask};
use proptest::prelude::*;
use rand::RngExt;

#[test]
fn exhaustive_count_and_mask_soundness_16bus() {
    let net = Network::builtin("16bus").unwrap();
    let all = all_radial_configurations(&net);
    assert_eq!(all.len(), 190);
    assert_eq!(count_radial_configurations(&net).unwrap(), 190u32.into());
    let mut rng = seeded_rng(1, 0);
    let m = net.branch_count();
    for _ in 0..50 {
        let cfg = &all[rng.random_range(0..all.len())];
        let mask = switch_pair_mask(&net, cfg).unwrap();
        for i in 0..m {
            for j in 0..m {
                // Closing open i and opening closed j (or i itself) is the
                // full action grammar; any other cell must be masked.
                let mut next = cfg.clone();
                let well_formed = !cfg.is_closed(i) && (i == j || cfg.is_closed(j));
                if well_formed {
                    next.set(i, true);
                    next.set(j, false);
                }
                let radial = well_formed && is_radial(&net, &next);
                assert_eq!(mask.contains(i, j), radial, "cell ({i}, {j})");
                if radial {
                    assert_eq!(apply_pair(cfg, &mask, i, j).unwrap(), next);
                }
            }
        }
    }
}

#[test]
fn random_draws_are_uniform_over_exchanges() {
    let net = Network::builtin("33bus").unwrap();
    let cfg = net.base_configuration();
    let mask = switch_pair_mask(&net, &cfg).unwrap();
    let exchanges: Vec<(usize, usize)> = mask.exchanges().collect();
    let probs = ScenarioProbs::new(0.0, 0.0, 1.0).unwrap();
    let greedy = DnrAction::new(exchanges[0].0, exchanges[0].1);
    let mut rng = seeded_rng(2, 0);
    let draws = 10_000;
    let mut counts = vec![0usize; exchanges.len()];
    for _ in 0..draws {
        let (a, s) = draw_behavior_action(&probs, &mask, greedy, &mut rng).unwrap();
        assert_eq!(s, Scenario::Random);
        counts[exchanges.iter().position(|&e| e == (a.close_i, a.open_j)).unwrap()] += 1;
    }
    let expected = draws as f64 / exchanges.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Upper 0.1% point of chi-square with k-1 dof, Wilson-Hilferty.
    let k = (exchanges.len() - 1) as f64;
    let z = 3.09;
    let bound = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
    assert!(chi2 < bound, "chi2 {chi2} over {bound} with {k} dof");
}

#[test]
fn generated_batches_respect_the_behavior_contract() {
    let net = Network::builtin("16bus").unwrap();
    let spec = DatasetSpec { probs: ScenarioProbs::from_ratio(0.3, 4.0).unwrap(), train_weeks: 60, calibration_hours: 96, ..Default::default() };
    let g = generate_dataset(&net, &spec, 4).unwrap();
    let n = g.train.len();
    assert!(n >= 10_000);
    let mut freq = [0usize; 3];
    let cs = net.switch_cost().unwrap();
    for t in g.train.transitions.iter().chain(&g.test.transitions) {
        assert!(t.mask.contains(t.action.close_i, t.action.open_j));
        assert!(is_radial(&net, &t.config_next));
        let toggles = t.config.hamming(&t.config_next);
        assert!(toggles == 0 || toggles == 2);
        assert!(t.info.switch_cost == 0.0 || (t.info.switch_cost - 2.0 * cs).abs() < 1e-12);
        assert!((t.reward * g.train.header.reward_scale - t.info.reward()).abs() <= 1e-9 * t.info.reward().abs().max(1.0));
    }
    for t in &g.train.transitions {
        match t.scenario {
            Scenario::Model => freq[0] += 1,
            Scenario::Fixed => freq[1] += 1,
            Scenario::Random => freq[2] += 1,
            Scenario::Unknown => panic!("generated transitions carry their scenario"),
        }
    }
    for (k, p) in spec.probs.as_array().iter().enumerate() {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((freq[k] as f64 - n as f64 * p).abs() <= 3.0 * sigma, "scenario {k}: {} vs {}", freq[k], n as f64 * p);
    }
    let last_train = g.train.transitions.last().unwrap().t;
    assert!(g.test.transitions.iter().all(|t| t.t > last_train));
    assert_eq!(g.test_start(), spec.train_weeks * HOURS_PER_WEEK);
}

#[test]
fn model_only_batch_replays_the_controller() {
    let net = Network::builtin("16bus").unwrap();
    let spec = DatasetSpec { probs: ScenarioProbs::new(1.0, 0.0, 0.0).unwrap(), train_weeks: 1, calibration_hours: 48, ..Default::default() };
    let g = generate_dataset(&net, &spec, 5).unwrap();
    assert!(g.train.transitions.iter().all(|t| Some(t.action) == t.greedy));
    assert_eq!(generate_dataset(&net, &spec, 5).unwrap().train.transitions, g.train.transitions);
}

#[test]
fn policies_respect_masks_and_the_myopic_bound() {
    let net = Network::builtin("16bus").unwrap();
    let spec = DatasetSpec { probs: ScenarioProbs::from_ratio(0.5, 4.0).unwrap(), train_weeks: 2, calibration_hours: 96, ..Default::default() };
    let g = generate_dataset(&net, &spec, 6).unwrap();
    let params: RewardParams = g.train.header.params;
    let env = DnrEnv::new(net.clone(), Arc::new(g.series.clone()), params).unwrap();
    let all = all_radial_configurations(&net);
    let t0 = g.test_start();
    let monitored: Vec<usize> = (0..net.bus_count()).collect();
    let bound: Vec<f64> = (t0..t0 + HOURS_PER_WEEK)
        .map(|t| {
            all.iter()
                .filter_map(|cfg| {
                    let sol = solve_power_flow(&net, cfg, &g.series[t]).unwrap();
                    sol.converged.then(|| {
                        params.c_loss * total_losses(&sol).unwrap() * params.dt_hours
                            + params.lambda * voltage_violation(&sol, params.v_lo, params.v_hi, &monitored).unwrap()
                    })
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let norms = &g.train.header.norms;
    let d = norms.feature_dim(net.branch_count());
    let mut rng = seeded_rng(7, 0);
    let shared = SharedHyper { discount: 0.95, hidden_layers: 2, reward_scale: 500.0, training_steps: 1, checkpoint_every: 0 };
    let hyper = AgentHyper { temperature: 1.0, learning_rate: 1e-3, hidden_units: 16, rho: 0.5, minibatch: 1 };
    let random_actor = BcsacModel::new("sac", d, net.branch_count(), hyper, &shared, &mut rng);
    let mut policies: Vec<Box<dyn Policy>> = vec![
        Box::new(StayPolicy),
        Box::new(ControllerPolicy { model: net.clone(), params, monitored: monitored.clone() }),
        Box::new(ReplayPolicy::new(g.test.transitions.iter().map(|t| t.action).collect())),
        Box::new(ActorPolicy::greedy(&random_actor)),
        Box::new(ActorPolicy::stochastic(&random_actor, seeded_rng(8, 0))),
    ];
    for p in policies.iter_mut() {
        let ev = evaluate_weekly_cost(&env, norms, p.as_mut(), g.final_train_config(), t0, HOURS_PER_WEEK, f64::INFINITY).unwrap();
        for h in ev.hourly.iter().filter(|h| h.converged) {
            let b = bound[h.t - t0];
            assert!(h.cost >= b - 1e-9 * b, "hour {}: {} below {b}", h.t, h.cost);
        }
        if ev.non_converged == 0 {
            let total: f64 = bound.iter().sum();
            assert!(ev.total_cost >= total - 1e-9 * total);
        }
    }
}

#[test]
fn replay_reproduces_realized_cost_across_seeds() {
    let net = Network::builtin("16bus").unwrap();
    for seed in 10..13 {
        let spec = DatasetSpec { probs: ScenarioProbs::from_ratio(0.2, 4.0).unwrap(), train_weeks: 1, calibration_hours: 48, ..Default::default() };
        let g = generate_dataset(&net, &spec, seed).unwrap();
        let env = DnrEnv::new(net.clone(), Arc::new(g.series.clone()), g.train.header.params).unwrap();
        let mut replay = ReplayPolicy::new(g.test.transitions.iter().map(|t| t.action).collect());
        let ev = evaluate_weekly_cost(&env, &g.train.header.norms, &mut replay, g.final_train_config(), g.test_start(), HOURS_PER_WEEK, 0.0).unwrap();
        let realized = g.test.realized_cost();
        assert!((ev.total_cost - realized).abs() <= 1e-9 * realized);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn behavior_distribution_is_a_masked_mixture(seed in 0u64..1000, p_mod in 0.0f64..1.0, split in 0.0f64..1.0) {
        let net = Network::builtin("33bus").unwrap();
        let mut rng = seeded_rng(seed, 0);
        let cfg = random_configuration(&net, 5, &mut rng);
        let mask = switch_pair_mask(&net, &cfg).unwrap();
        let pairs: Vec<(usize, usize)> = mask.pairs().collect();
        let (gi, gj) = pairs[rng.random_range(0..pairs.len())];
        let probs = ScenarioProbs::new(p_mod, (1.0 - p_mod) * split, (1.0 - p_mod) * (1.0 - split)).unwrap();
        let dist = behavior_distribution(&probs, &mask, DnrAction::new(gi, gj)).unwrap();
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m = net.branch_count();
        for (k, &p) in dist.iter().enumerate() {
            if !mask.contains(k / m, k % m) {
                prop_assert_eq!(p, 0.0);
            }
        }
        prop_assert!(dist[gi * m + gj] >= p_mod - 1e-15);
    }

    #[test]
    fn decoder_puts_no_mass_outside_the_mask(seed in 0u64..1000) {
        let net = Network::builtin("16bus").unwrap();
        let m = net.branch_count();
        let mut rng = seeded_rng(seed, 1);
        let hp = CvaeHyper { learning_rate: 1e-3, hidden: 8, hidden_layers: 2, latent: 3, batch: 4, steps: 1, samples: 3 };
        let model = CvaeModel::new(10, m, &hp, &mut rng);
        let s: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cfg = random_configuration(&net, 3, &mut rng);
        let mask = switch_pair_mask(&net, &cfg).unwrap();
        let dist = model.behavior_distribution(&s, &mask, 3, &mut rng).unwrap();
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (k, &p) in dist.iter().enumerate() {
            prop_assert!(mask.contains(k / m, k % m) || p == 0.0);
        }
    }

    #[test]
    fn violation_is_monotone_away_from_band(v in 0.5f64..1.5, step in 0.0f64..0.3) {
        use dnr_core::grid::InjectionFrame;
        // Pure load keeps every voltage below the upper limit; more load
        // moves voltages further below the lower limit.
        let net = Network::builtin("16bus").unwrap();
        let cfg = net.base_configuration();
        let mut frame = InjectionFrame::zeros(0, net.bus_count());
        let load = net.load_buses()[0];
        frame.p[load] = -(1.0 - v).max(0.0) * 0.5;
        let heavier = {
            let mut f = frame.clone();
            f.p[load] -= step * 0.5;
            f
        };
        let buses: Vec<usize> = (0..net.bus_count()).collect();
        let a = solve_power_flow(&net, &cfg, &frame).unwrap();
        let b = solve_power_flow(&net, &cfg, &heavier).unwrap();
        prop_assume!(a.converged && b.converged);
        let va = voltage_violation(&a, 0.9, 1.1, &buses).unwrap();
        let vb = voltage_violation(&b, 0.9, 1.1, &buses).unwrap();
        prop_assert!(vb >= va - 1e-12);
    }
}

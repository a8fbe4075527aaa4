//! Three enumerable states embedded as one-hot features: the learned actor's
//! greedy actions must match the exact batch-constrained soft optimum.

use dnr_core::agents::{train_bcsac, train_sac, AgentHyper, BehaviorTable, PreparedData, SharedHyper};
use dnr_core::env::DnrAction;
use dnr_core::seeded_rng;
use dnr_core::tabular::{bc_soft_policy_iteration, FiniteMdp, TabularPolicy};
use dnr_core::topology::SwitchPairMask;
use ndarray::Array2;

const NEXT: [usize; 12] = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2];
const REWARD: [f64; 12] = [-1.0, -0.2, -0.6, -0.9, -0.5, -1.0, 0.0, -0.8, -0.3, -0.7, -1.0, 0.2];
const GAMMA: f64 = 0.5;
const TAU: f64 = 0.3;

fn batch(copies: usize) -> PreparedData {
    let mask = SwitchPairMask::from_pairs(2, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    let n = 12 * copies;
    let mut s = Array2::zeros((n, 3));
    let mut s_next = Array2::zeros((n, 3));
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for row in 0..n {
        let k = row % 12;
        s[[row, k / 4]] = 1.0;
        s_next[[row, NEXT[k]]] = 1.0;
        actions.push(DnrAction::from_flat(k % 4, 2));
        rewards.push(REWARD[k]);
    }
    let masks = vec![&mask; n];
    PreparedData::new(2, s, s_next, actions, rewards, &masks, &masks).unwrap()
}

fn behavior() -> TabularPolicy {
    let row = [0.55, 0.15, 0.15, 0.15];
    TabularPolicy { n_states: 3, n_actions: 4, probs: row.iter().cycle().take(12).copied().collect() }
}

fn greedy(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |b, a| if p[a] > p[b] { a } else { b })
}

fn hyper() -> (AgentHyper, SharedHyper) {
    (
        AgentHyper { temperature: TAU, learning_rate: 1e-3, hidden_units: 32, rho: 0.9, minibatch: 64 },
        SharedHyper { discount: GAMMA, hidden_layers: 2, reward_scale: 1.0, training_steps: 4000, checkpoint_every: 0 },
    )
}

#[test]
fn bcsac_matches_the_tabular_optimum() {
    let mdp = FiniteMdp::deterministic(3, 4, &NEXT, REWARD.to_vec(), GAMMA).unwrap();
    let pb = behavior();
    let exact = bc_soft_policy_iteration(&mdp, &pb, TAU, 1e-12, None).unwrap();
    let data = batch(50);
    let rows: Vec<usize> = (0..3).map(|s| s * 4).collect();
    let dists: Vec<Vec<f64>> = (0..data.len()).map(|k| pb.row(k % 12 / 4).to_vec()).collect();
    let table = BehaviorTable::from_distributions(&data, &dists).unwrap();
    let (h, sh) = hyper();
    let run = train_bcsac(&data, &table, &h, &sh, &mut seeded_rng(1, 0)).unwrap();
    let mut differs_from_behavior = false;
    for (s, &row) in rows.iter().enumerate() {
        let learned = run.model.policy(data.s.row(row).as_slice().unwrap(), &data.feasible[row]).unwrap();
        let target = exact.policy.row(s);
        assert_eq!(greedy(&learned), greedy(target), "state {s}: {learned:?} vs {target:?}");
        let tv: f64 = 0.5 * learned.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.1, "state {s}: tv {tv}");
        differs_from_behavior |= greedy(target) != greedy(pb.row(s));
    }
    assert!(differs_from_behavior);
}

#[test]
fn uniform_behavior_makes_bcsac_and_sac_agree() {
    let data = batch(50);
    let (h, sh) = hyper();
    let bc = train_bcsac(&data, &BehaviorTable::uniform(&data), &h, &sh, &mut seeded_rng(2, 0)).unwrap();
    let sac = train_sac(&data, &h, &sh, &mut seeded_rng(3, 0)).unwrap();
    let mdp = FiniteMdp::deterministic(3, 4, &NEXT, REWARD.to_vec(), GAMMA).unwrap();
    let uniform = TabularPolicy::uniform(3, 4);
    let exact = bc_soft_policy_iteration(&mdp, &uniform, TAU, 1e-12, None).unwrap();
    for s in 0..3 {
        let row = s * 4;
        let x = data.s.row(row).to_vec();
        let a = greedy(&bc.model.policy(&x, &data.feasible[row]).unwrap());
        let b = greedy(&sac.model.policy(&x, &data.feasible[row]).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, greedy(exact.policy.row(s)));
    }
}

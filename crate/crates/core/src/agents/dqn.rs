use rand::Rng;
use serde::Serialize;

use super::bcsac::{argmax_feasible, q_table};
use super::{critic_input, model_from, regression_loss_and_grad, DqnHyper, PreparedData, SharedHyper};
use crate::env::DnrAction;
use crate::nn::{AdamState, Checkpoint, Mlp};
use crate::{DnrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DqnStats {
    pub step: usize,
    pub loss: f64,
    /// The target network was refreshed after this step.
    pub copied: bool,
}

/// Single critic with a periodically copied target network.
#[derive(Debug, Clone)]
pub struct DqnModel {
    pub q: Mlp,
    pub q_target: Mlp,
    pub hyper: DqnHyper,
    pub gamma: f64,
    pub m: usize,
    pub state_dim: usize,
    pub step: usize,
    opt: AdamState,
}

impl DqnModel {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, m: usize, hyper: DqnHyper, shared: &SharedHyper, rng: &mut R) -> Self {
        let q = Mlp::xavier(&Mlp::sizes(state_dim + m, hyper.hidden_units, shared.hidden_layers, m), rng);
        Self::assemble(q.clone(), q, hyper, shared.discount, m, state_dim)
    }

    fn assemble(q: Mlp, q_target: Mlp, hyper: DqnHyper, gamma: f64, m: usize, state_dim: usize) -> Self {
        DqnModel { opt: AdamState::new(&q, hyper.learning_rate), q, q_target, hyper, gamma, m, state_dim, step: 0 }
    }

    /// r + γ max over the next state's feasible cells of the target critic.
    pub fn targets(&self, data: &PreparedData, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .map(|&k| {
                let table = q_table(&self.q_target, data.s_next.row(k).as_slice().unwrap(), self.m);
                let best = data.feasible_next[k].iter().map(|&c| table[c]).fold(f64::NEG_INFINITY, f64::max);
                data.rewards[k] + self.gamma * best
            })
            .collect()
    }

    pub fn train_step<R: Rng + ?Sized>(&mut self, data: &PreparedData, rng: &mut R) -> Result<DqnStats> {
        let idx = data.sample_indices(self.hyper.minibatch, rng);
        let targets = self.targets(data, &idx);
        let closes: Vec<usize> = idx.iter().map(|&k| data.actions[k].close_i).collect();
        let cols: Vec<usize> = idx.iter().map(|&k| data.actions[k].open_j).collect();
        let x = critic_input(data.s.view(), &idx, &closes, self.m);
        let (loss, g) = regression_loss_and_grad(&self.q, x.view(), &cols, &targets)?;
        self.opt.step(&mut self.q, &g)?;
        self.step += 1;
        let copied = self.step % self.hyper.copy_steps == 0;
        if copied {
            self.q_target = self.q.clone();
        }
        Ok(DqnStats { step: self.step, loss, copied })
    }

    /// Masked argmax of the online critic.
    pub fn greedy(&self, s: &[f64], feasible: &[usize]) -> Result<DnrAction> {
        let table = q_table(&self.q, s, self.m);
        argmax_feasible(&table, feasible)
            .map(|k| DnrAction::from_flat(k, self.m))
            .ok_or_else(|| DnrError::Contract("empty mask".into()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(serde_json::json!({
            "kind": "agent",
            "algo": "dqn",
            "m": self.m,
            "state_dim": self.state_dim,
            "gamma": self.gamma,
            "step": self.step,
            "hyper": self.hyper,
        }))
        .with("q", &self.q)
        .with("q_target", &self.q_target)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta["kind"] != "agent" || meta["algo"] != "dqn" {
            return Err(DnrError::Checkpoint("not a DQN checkpoint".into()));
        }
        let hyper: DqnHyper = serde_json::from_value(meta["hyper"].clone())?;
        let num = |k: &str| meta[k].as_u64().map(|v| v as usize).ok_or_else(|| DnrError::Checkpoint(format!("missing {k}")));
        let gamma = meta["gamma"].as_f64().ok_or_else(|| DnrError::Checkpoint("missing gamma".into()))?;
        let mut model = Self::assemble(model_from(ckpt, "q")?, model_from(ckpt, "q_target")?, hyper, gamma, num("m")?, num("state_dim")?);
        model.step = num("step")?;
        Ok(model)
    }
}

pub struct DqnRun {
    pub model: DqnModel,
    pub checkpoints: Vec<(usize, Checkpoint)>,
    pub stats: Vec<DqnStats>,
}

pub fn train_dqn<R: Rng + ?Sized>(data: &PreparedData, hyper: &DqnHyper, shared: &SharedHyper, rng: &mut R) -> Result<DqnRun> {
    if data.is_empty() {
        return Err(DnrError::Validation("empty transition batch".into()));
    }
    if hyper.copy_steps == 0 {
        return Err(DnrError::Config("copy steps must be positive".into()));
    }
    let mut model = DqnModel::new(data.state_dim, data.m, *hyper, shared, rng);
    let mut checkpoints = Vec::new();
    let mut stats = Vec::with_capacity(shared.training_steps);
    for _ in 0..shared.training_steps {
        let st = model.train_step(data, rng)?;
        stats.push(st);
        if shared.checkpoint_every > 0 && st.step % shared.checkpoint_every == 0 {
            checkpoints.push((st.step, model.to_checkpoint()));
        }
    }
    Ok(DqnRun { model, checkpoints, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentHyper, BcsacModel};
    use crate::seeded_rng;
    use crate::topology::SwitchPairMask;
    use ndarray::Array2;
    use rand::RngExt;

    fn data(rng: &mut impl Rng) -> PreparedData {
        let mask = SwitchPairMask::from_pairs(3, vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 0)]);
        let n = 12;
        let masks = vec![&mask; n];
        let pairs: Vec<_> = mask.pairs().collect();
        PreparedData::new(
            3,
            Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0)),
            (0..n).map(|k| DnrAction::new(pairs[k % 5].0, pairs[k % 5].1)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..0.0)).collect(),
            &masks,
            &masks,
        )
        .unwrap()
    }

    fn shared(steps: usize) -> SharedHyper {
        SharedHyper { discount: 0.9, hidden_layers: 2, reward_scale: 500.0, training_steps: steps, checkpoint_every: 0 }
    }

    #[test]
    fn target_copies_on_multiples_of_copy_steps() {
        let mut rng = seeded_rng(1, 0);
        let d = data(&mut rng);
        let hp = DqnHyper { learning_rate: 1e-3, hidden_units: 8, copy_steps: 30, minibatch: 4 };
        let run = train_dqn(&d, &hp, &shared(95), &mut rng).unwrap();
        let copies: Vec<usize> = run.stats.iter().filter(|s| s.copied).map(|s| s.step).collect();
        assert_eq!(copies, vec![30, 60, 90]);
        assert_ne!(run.model.q, run.model.q_target);
    }

    #[test]
    fn sac_limit_and_dqn_share_argmax() {
        let mut rng = seeded_rng(2, 0);
        let d = data(&mut rng);
        let sh = shared(1);
        let hp = DqnHyper { learning_rate: 1e-3, hidden_units: 8, copy_steps: 30, minibatch: 4 };
        let dqn = DqnModel::new(4, 3, hp, &sh, &mut rng);
        let ah = AgentHyper { temperature: 1e-9, learning_rate: 1e-3, hidden_units: 8, rho: 0.5, minibatch: 4 };
        let mut sac = BcsacModel::new("sac", 4, 3, ah, &sh, &mut rng);
        sac.q1 = dqn.q.clone();
        // The soft-greedy policy exp(q/τ) concentrates on the critic argmax.
        for k in 0..d.len() {
            let s = d.s.row(k).to_vec();
            let table = sac.q_table(&s);
            let soft = argmax_feasible(&table.iter().map(|q| q / ah.temperature).collect::<Vec<_>>(), &d.feasible[k]).unwrap();
            assert_eq!(DnrAction::from_flat(soft, 3), dqn.greedy(&s, &d.feasible[k]).unwrap());
        }
    }
}

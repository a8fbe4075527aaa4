use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::Serialize;

use super::{critic_input, gather, model_from, regression_loss_and_grad, AgentHyper, BehaviorTable, PreparedData, SharedHyper};
use crate::env::DnrAction;
use crate::nn::{masked_log_softmax, sample_index, AdamState, Checkpoint, Mlp};
use crate::{DnrError, Result};

/// An action drawn from the actor for one minibatch state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAction {
    /// Position within the state's feasible list.
    pub pos: usize,
    pub flat: usize,
    pub log_pi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BcsacStats {
    pub step: usize,
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub v_loss: f64,
    pub actor_grad_norm: f64,
}

/// Two critics, a value network with its Polyak target, and the actor.
/// Without a behavior table the same updates are entropy-regularized SAC.
#[derive(Debug, Clone)]
pub struct BcsacModel {
    pub q1: Mlp,
    pub q2: Mlp,
    pub v: Mlp,
    pub v_target: Mlp,
    pub actor: Mlp,
    pub hyper: AgentHyper,
    pub gamma: f64,
    pub m: usize,
    pub state_dim: usize,
    pub algo: String,
    pub step: usize,
    opt_q1: AdamState,
    opt_q2: AdamState,
    opt_v: AdamState,
    opt_actor: AdamState,
}

impl BcsacModel {
    pub fn new<R: Rng + ?Sized>(algo: &str, state_dim: usize, m: usize, hyper: AgentHyper, shared: &SharedHyper, rng: &mut R) -> Self {
        let (h, l) = (hyper.hidden_units, shared.hidden_layers);
        let q1 = Mlp::xavier(&Mlp::sizes(state_dim + m, h, l, m), rng);
        let q2 = Mlp::xavier(&Mlp::sizes(state_dim + m, h, l, m), rng);
        let v = Mlp::xavier(&Mlp::sizes(state_dim, h, l, 1), rng);
        let actor = Mlp::xavier(&Mlp::sizes(state_dim, h, l, m * m), rng);
        Self::assemble(algo, q1, q2, v.clone(), v, actor, hyper, shared.discount, m, state_dim)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(algo: &str, q1: Mlp, q2: Mlp, v: Mlp, v_target: Mlp, actor: Mlp, hyper: AgentHyper, gamma: f64, m: usize, state_dim: usize) -> Self {
        let lr = hyper.learning_rate;
        BcsacModel {
            opt_q1: AdamState::new(&q1, lr),
            opt_q2: AdamState::new(&q2, lr),
            opt_v: AdamState::new(&v, lr),
            opt_actor: AdamState::new(&actor, lr),
            q1,
            q2,
            v,
            v_target,
            actor,
            hyper,
            gamma,
            m,
            state_dim,
            algo: algo.to_string(),
            step: 0,
        }
    }

    /// Draws â ~ π_φ(.|s) for each minibatch state.
    pub fn sample_actions<R: Rng + ?Sized>(&self, data: &PreparedData, idx: &[usize], rng: &mut R) -> Result<Vec<SampledAction>> {
        let logits = self.actor.forward(gather(data.s.view(), idx).view());
        idx.iter()
            .enumerate()
            .map(|(r, &k)| {
                let feasible = &data.feasible[k];
                let lp = masked_log_softmax(logits.row(r).as_slice().unwrap(), feasible)?;
                let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                let pos = sample_index(&probs, rng);
                Ok(SampledAction { pos, flat: feasible[pos], log_pi: lp[pos] })
            })
            .collect()
    }

    /// r + γ v_ψ̄(s′).
    pub fn critic_targets(&self, data: &PreparedData, idx: &[usize]) -> Vec<f64> {
        let v_next = self.v_target.forward(gather(data.s_next.view(), idx).view());
        idx.iter()
            .enumerate()
            .map(|(r, &k)| data.rewards[k] + self.gamma * v_next[[r, 0]])
            .collect()
    }

    /// One Adam step of each critic towards the shared targets.
    pub fn critic_update(&mut self, data: &PreparedData, idx: &[usize]) -> Result<(f64, f64)> {
        let targets = self.critic_targets(data, idx);
        let closes: Vec<usize> = idx.iter().map(|&k| data.actions[k].close_i).collect();
        let cols: Vec<usize> = idx.iter().map(|&k| data.actions[k].open_j).collect();
        let x = critic_input(data.s.view(), idx, &closes, self.m);
        let (l1, g1) = regression_loss_and_grad(&self.q1, x.view(), &cols, &targets)?;
        let (l2, g2) = regression_loss_and_grad(&self.q2, x.view(), &cols, &targets)?;
        self.opt_q1.step(&mut self.q1, &g1)?;
        self.opt_q2.step(&mut self.q2, &g2)?;
        Ok((l1, l2))
    }

    /// Critic values at the sampled actions: (q1, min(q1, q2)).
    pub fn critic_values(&self, data: &PreparedData, idx: &[usize], a_hat: &[SampledAction]) -> (Vec<f64>, Vec<f64>) {
        let closes: Vec<usize> = a_hat.iter().map(|a| a.flat / self.m).collect();
        let x = critic_input(data.s.view(), idx, &closes, self.m);
        let o1 = self.q1.forward(x.view());
        let o2 = self.q2.forward(x.view());
        let mut q1 = Vec::with_capacity(idx.len());
        let mut qmin = Vec::with_capacity(idx.len());
        for (r, a) in a_hat.iter().enumerate() {
            let j = a.flat % self.m;
            q1.push(o1[[r, j]]);
            qmin.push(o1[[r, j]].min(o2[[r, j]]));
        }
        (q1, qmin)
    }

    fn behavior_log(behavior: Option<&BehaviorTable>, k: usize, a: &SampledAction) -> f64 {
        behavior.map_or(0.0, |b| b.log_prob(k, a.pos))
    }

    /// min_i q_θi(s, â) − τ log π_φ(â|s) + τ log π^b(â|s).
    pub fn value_targets(&self, data: &PreparedData, idx: &[usize], a_hat: &[SampledAction], behavior: Option<&BehaviorTable>) -> Vec<f64> {
        let (_, qmin) = self.critic_values(data, idx, a_hat);
        let tau = self.hyper.temperature;
        idx.iter()
            .zip(a_hat)
            .zip(qmin)
            .map(|((&k, a), q)| q - tau * a.log_pi + tau * Self::behavior_log(behavior, k, a))
            .collect()
    }

    pub fn value_update(&mut self, data: &PreparedData, idx: &[usize], a_hat: &[SampledAction], behavior: Option<&BehaviorTable>) -> Result<f64> {
        let targets = self.value_targets(data, idx, a_hat, behavior);
        let x = gather(data.s.view(), idx);
        let (loss, g) = regression_loss_and_grad(&self.v, x.view(), &vec![0; idx.len()], &targets)?;
        self.opt_v.step(&mut self.v, &g)?;
        Ok(loss)
    }

    /// ψ̄ ← ρψ̄ + (1 − ρ)ψ.
    pub fn target_value_update(&mut self) {
        self.v_target.polyak_from(&self.v, self.hyper.rho);
    }

    /// Bracketed coefficients q_θ1(s,â) − τ(log π_φ(â|s) − log π^b(â|s)).
    pub fn actor_coefficients(&self, data: &PreparedData, idx: &[usize], a_hat: &[SampledAction], behavior: Option<&BehaviorTable>) -> Vec<f64> {
        let (q1, _) = self.critic_values(data, idx, a_hat);
        let tau = self.hyper.temperature;
        idx.iter()
            .zip(a_hat)
            .zip(q1)
            .map(|((&k, a), q)| q - tau * (a.log_pi - Self::behavior_log(behavior, k, a)))
            .collect()
    }

    /// Ascent along the one-sample policy-gradient estimator; returns the
    /// gradient norm.
    pub fn actor_update(&mut self, data: &PreparedData, idx: &[usize], a_hat: &[SampledAction], behavior: Option<&BehaviorTable>) -> Result<f64> {
        let coefs = self.actor_coefficients(data, idx, a_hat, behavior);
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(DnrError::NonFinite("actor coefficient is not finite; batch rejected".into()));
        }
        let feasible: Vec<&[usize]> = idx.iter().map(|&k| data.feasible[k].as_slice()).collect();
        let positions: Vec<usize> = a_hat.iter().map(|a| a.pos).collect();
        let x = gather(data.s.view(), idx);
        let (_, grads) = actor_surrogate_and_grad(&self.actor, x.view(), &feasible, &positions, &coefs)?;
        self.opt_actor.step(&mut self.actor, &grads)?;
        Ok(grads.squared_norm().sqrt())
    }

    /// One iteration: sample minibatch and â, then critics, value, target,
    /// actor.
    pub fn train_step<R: Rng + ?Sized>(&mut self, data: &PreparedData, behavior: Option<&BehaviorTable>, rng: &mut R) -> Result<BcsacStats> {
        let idx = data.sample_indices(self.hyper.minibatch, rng);
        let a_hat = self.sample_actions(data, &idx, rng)?;
        let (q1_loss, q2_loss) = self.critic_update(data, &idx)?;
        let v_loss = self.value_update(data, &idx, &a_hat, behavior)?;
        self.target_value_update();
        let actor_grad_norm = self.actor_update(data, &idx, &a_hat, behavior)?;
        self.step += 1;
        Ok(BcsacStats { step: self.step, q1_loss, q2_loss, v_loss, actor_grad_norm })
    }

    /// Feasible probabilities of the actor at one state.
    pub fn policy(&self, s: &[f64], feasible: &[usize]) -> Result<Vec<f64>> {
        let logits = self.actor.forward(ArrayView2::from_shape((1, s.len()), s).map_err(|e| DnrError::Contract(e.to_string()))?);
        Ok(masked_log_softmax(logits.row(0).as_slice().unwrap(), feasible)?.iter().map(|l| l.exp()).collect())
    }

    /// Critic q_θ1 over the whole m*m table at one state (row i: close i).
    pub fn q_table(&self, s: &[f64]) -> Vec<f64> {
        q_table(&self.q1, s, self.m)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(serde_json::json!({
            "kind": "agent",
            "algo": self.algo,
            "m": self.m,
            "state_dim": self.state_dim,
            "gamma": self.gamma,
            "step": self.step,
            "hyper": self.hyper,
        }))
        .with("q1", &self.q1)
        .with("q2", &self.q2)
        .with("v", &self.v)
        .with("v_target", &self.v_target)
        .with("actor", &self.actor)
    }

    /// Networks from a checkpoint with fresh optimizer state.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta["kind"] != "agent" || !(meta["algo"] == "bcsac" || meta["algo"] == "sac") {
            return Err(DnrError::Checkpoint("not an actor-critic checkpoint".into()));
        }
        let hyper: AgentHyper = serde_json::from_value(meta["hyper"].clone())?;
        let num = |k: &str| meta[k].as_u64().map(|v| v as usize).ok_or_else(|| DnrError::Checkpoint(format!("missing {k}")));
        let mut model = Self::assemble(
            meta["algo"].as_str().unwrap(),
            model_from(ckpt, "q1")?,
            model_from(ckpt, "q2")?,
            model_from(ckpt, "v")?,
            model_from(ckpt, "v_target")?,
            model_from(ckpt, "actor")?,
            hyper,
            meta["gamma"].as_f64().ok_or_else(|| DnrError::Checkpoint("missing gamma".into()))?,
            num("m")?,
            num("state_dim")?,
        );
        model.step = num("step")?;
        Ok(model)
    }
}

/// Critic outputs for every closable row at one state, as an m*m table.
pub(crate) fn q_table(critic: &Mlp, s: &[f64], m: usize) -> Vec<f64> {
    let d = s.len();
    let mut x = Array2::zeros((m, d + m));
    for i in 0..m {
        x.row_mut(i).slice_mut(ndarray::s![..d]).assign(&ndarray::ArrayView1::from(s));
        x[[i, d + i]] = 1.0;
    }
    critic.forward(x.view()).iter().copied().collect()
}

/// Loss −(1/B) Σ c_b log π(â_b|s_b) with its gradient; the coefficients are
/// constants.
pub fn actor_surrogate_and_grad(actor: &Mlp, x: ArrayView2<f64>, feasible: &[&[usize]], positions: &[usize], coefs: &[f64]) -> Result<(f64, Mlp)> {
    let (logits, tape) = actor.forward_tape(x);
    let b = positions.len() as f64;
    let mut d = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for r in 0..positions.len() {
        let lp = masked_log_softmax(logits.row(r).as_slice().unwrap(), feasible[r])?;
        loss -= coefs[r] * lp[positions[r]] / b;
        for (p, (&k, l)) in feasible[r].iter().zip(&lp).enumerate() {
            let onehot = if p == positions[r] { 1.0 } else { 0.0 };
            d[[r, k]] = -coefs[r] * (onehot - l.exp()) / b;
        }
    }
    let mut grads = actor.zeros_like();
    actor.backward_into(&tape, d, &mut grads, false);
    Ok((loss, grads))
}

/// Σ_a π(a|s) f(a) ∇_φ log π(a|s) by enumeration of the feasible actions,
/// where `bracket(pos, log π)` gives f. Returned in the ascent direction.
pub fn expected_actor_gradient(actor: &Mlp, s: &[f64], feasible: &[usize], bracket: &dyn Fn(usize, f64) -> f64) -> Result<Mlp> {
    let x = ArrayView2::from_shape((1, s.len()), s).map_err(|e| DnrError::Contract(e.to_string()))?;
    let (logits, tape) = actor.forward_tape(x);
    let lp = masked_log_softmax(logits.row(0).as_slice().unwrap(), feasible)?;
    let pi: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mut d = Array2::zeros(logits.dim());
    for a in 0..feasible.len() {
        let w = pi[a] * bracket(a, lp[a]);
        // ∇_h log π(a) = e_a − π on feasible cells.
        for (p, &k) in feasible.iter().enumerate() {
            let onehot = if p == a { 1.0 } else { 0.0 };
            d[[0, k]] += w * (onehot - pi[p]);
        }
    }
    let mut grads = actor.zeros_like();
    actor.backward_into(&tape, d, &mut grads, false);
    Ok(grads)
}

/// τ putting |A(s)|/τ on the scale of the rewards, both averaged over the
/// batch.
pub fn suggest_temperature(data: &PreparedData) -> Result<f64> {
    let n = data.len() as f64;
    let actions = data.feasible.iter().map(|f| f.len() as f64).sum::<f64>() / n;
    let reward = data.rewards.iter().map(|r| r.abs()).sum::<f64>() / n;
    if !(reward > 0.0) {
        return Err(DnrError::Validation("all rewards are zero; temperature is unconstrained".into()));
    }
    Ok(actions / reward)
}

/// Training output shared by the actor-critic learners.
pub struct TrainRun {
    pub model: BcsacModel,
    pub checkpoints: Vec<(usize, Checkpoint)>,
    pub stats: Vec<BcsacStats>,
}

fn train_actor_critic<R: Rng + ?Sized>(
    algo: &str,
    data: &PreparedData,
    behavior: Option<&BehaviorTable>,
    hyper: &AgentHyper,
    shared: &SharedHyper,
    rng: &mut R,
) -> Result<TrainRun> {
    if data.is_empty() {
        return Err(DnrError::Validation("empty transition batch".into()));
    }
    if let Some(b) = behavior {
        if b.log_probs.len() != data.len() {
            return Err(DnrError::Validation("behavior table does not match the batch".into()));
        }
    }
    let mut model = BcsacModel::new(algo, data.state_dim, data.m, *hyper, shared, rng);
    let mut checkpoints = Vec::new();
    let mut stats = Vec::with_capacity(shared.training_steps);
    for _ in 0..shared.training_steps {
        let st = model.train_step(data, behavior, rng)?;
        stats.push(st);
        if shared.checkpoint_every > 0 && st.step % shared.checkpoint_every == 0 {
            checkpoints.push((st.step, model.to_checkpoint()));
        }
    }
    Ok(TrainRun { model, checkpoints, stats })
}

pub fn train_bcsac<R: Rng + ?Sized>(data: &PreparedData, behavior: &BehaviorTable, hyper: &AgentHyper, shared: &SharedHyper, rng: &mut R) -> Result<TrainRun> {
    train_actor_critic("bcsac", data, Some(behavior), hyper, shared, rng)
}

pub fn train_sac<R: Rng + ?Sized>(data: &PreparedData, hyper: &AgentHyper, shared: &SharedHyper, rng: &mut R) -> Result<TrainRun> {
    train_actor_critic("sac", data, None, hyper, shared, rng)
}

/// Greedy action of the actor: the feasible cell with the largest logit.
pub(crate) fn actor_argmax(actor: &Mlp, s: &[f64], feasible: &[usize], m: usize) -> Result<DnrAction> {
    let logits = actor.forward(ArrayView2::from_shape((1, s.len()), s).map_err(|e| DnrError::Contract(e.to_string()))?);
    let row = logits.row(0);
    let best = argmax_feasible(row.as_slice().unwrap(), feasible)
        .ok_or_else(|| DnrError::Contract("empty mask".into()))?;
    Ok(DnrAction::from_flat(best, m))
}

/// First feasible cell of maximal value.
pub(crate) fn argmax_feasible(values: &[f64], feasible: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &k in feasible {
        if best.is_none_or(|(_, b)| values[k] > b) {
            best = Some((k, values[k]));
        }
    }
    best.map(|(k, _)| k)
}

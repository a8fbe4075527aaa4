use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::bcsac::actor_argmax;
use super::{BcsacModel, DqnModel};
use crate::behavior_data::greedy_reconfig_controller;
use crate::env::{encode_state, DnrAction, DnrEnv, DnrState, Normalization, RewardParams};
use crate::grid::Network;
use crate::nn::{masked_softmax, sample_index, Mlp};
use crate::topology::{Configuration, SwitchPairMask};
use crate::{DnrError, Result};

/// Operating policy queried once per hour.
pub trait Policy {
    fn act(&mut self, state: &DnrState, features: &[f64], mask: &SwitchPairMask) -> Result<DnrAction>;
}

/// Actor network; argmax of the masked logits, or a draw from the masked
/// softmax when a sampling stream is attached.
pub struct ActorPolicy {
    pub actor: Mlp,
    pub m: usize,
    pub sampler: Option<ChaCha8Rng>,
}

impl ActorPolicy {
    pub fn greedy(model: &BcsacModel) -> Self {
        ActorPolicy { actor: model.actor.clone(), m: model.m, sampler: None }
    }

    pub fn stochastic(model: &BcsacModel, rng: ChaCha8Rng) -> Self {
        ActorPolicy { actor: model.actor.clone(), m: model.m, sampler: Some(rng) }
    }
}

impl Policy for ActorPolicy {
    fn act(&mut self, _: &DnrState, features: &[f64], mask: &SwitchPairMask) -> Result<DnrAction> {
        let feasible = mask.flat_indices();
        match &mut self.sampler {
            None => actor_argmax(&self.actor, features, &feasible, self.m),
            Some(rng) => {
                let x = ndarray::ArrayView2::from_shape((1, features.len()), features).map_err(|e| DnrError::Contract(e.to_string()))?;
                let logits = self.actor.forward(x);
                let probs = masked_softmax(logits.row(0).as_slice().unwrap(), &feasible)?;
                Ok(DnrAction::from_flat(sample_index(&probs, rng), self.m))
            }
        }
    }
}

pub struct DqnPolicy(pub DqnModel);

impl Policy for DqnPolicy {
    fn act(&mut self, _: &DnrState, features: &[f64], mask: &SwitchPairMask) -> Result<DnrAction> {
        self.0.greedy(features, &mask.flat_indices())
    }
}

/// Never switches.
pub struct StayPolicy;

impl Policy for StayPolicy {
    fn act(&mut self, _: &DnrState, _: &[f64], mask: &SwitchPairMask) -> Result<DnrAction> {
        let (i, j) = mask.canonical_stay().ok_or_else(|| DnrError::Contract("configuration has no closeable switch".into()))?;
        Ok(DnrAction::new(i, j))
    }
}

/// Plays back recorded actions in order.
pub struct ReplayPolicy {
    pub actions: Vec<DnrAction>,
    next: usize,
}

impl ReplayPolicy {
    pub fn new(actions: Vec<DnrAction>) -> Self {
        ReplayPolicy { actions, next: 0 }
    }
}

impl Policy for ReplayPolicy {
    fn act(&mut self, _: &DnrState, _: &[f64], _: &SwitchPairMask) -> Result<DnrAction> {
        let a = *self
            .actions
            .get(self.next)
            .ok_or_else(|| DnrError::Contract("replay exhausted".into()))?;
        self.next += 1;
        Ok(a)
    }
}

/// One-step greedy reconfiguration on a network model.
pub struct ControllerPolicy {
    pub model: Network,
    pub params: RewardParams,
    pub monitored: Vec<usize>,
}

impl Policy for ControllerPolicy {
    fn act(&mut self, state: &DnrState, _: &[f64], mask: &SwitchPairMask) -> Result<DnrAction> {
        greedy_reconfig_controller(&self.model, &self.params, &self.monitored, state, mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HourRecord {
    pub t: usize,
    pub close_i: usize,
    pub open_j: usize,
    pub cost: f64,
    pub loss_kw: f64,
    pub switch_cost: f64,
    pub penalty: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Σ of unscaled −R over the rollout.
    pub total_cost: f64,
    pub hourly: Vec<HourRecord>,
    pub non_converged: usize,
    /// Mean wall-clock seconds per policy decision.
    pub latency: f64,
}

/// Rolls `policy` for `hours` steps from `start` at hour `t0`. An hour whose
/// chosen action fails to converge is charged `fallback_cost` and the
/// configuration is kept.
pub fn evaluate_weekly_cost(
    env: &DnrEnv,
    norms: &Normalization,
    policy: &mut dyn Policy,
    start: &Configuration,
    t0: usize,
    hours: usize,
    fallback_cost: f64,
) -> Result<EvalResult> {
    if t0 + hours >= env.horizon() {
        return Err(DnrError::Validation(format!("evaluation window {t0}+{hours} exceeds the series")));
    }
    let mut state = env.reset(start, t0)?;
    let mut hourly = Vec::with_capacity(hours);
    let mut total_cost = 0.0;
    let mut non_converged = 0;
    let mut decision_time = 0.0;
    for _ in 0..hours {
        let mask = env.mask(&state)?;
        let features = encode_state(&state, norms);
        let clock = Instant::now();
        let action = policy.act(&state, &features, &mask)?;
        decision_time += clock.elapsed().as_secs_f64();
        if !mask.contains(action.close_i, action.open_j) {
            return Err(DnrError::RejectedAction { close: action.close_i, open: action.open_j });
        }
        let record = match env.step_masked(&state, &mask, action) {
            Ok(out) => {
                let rec = HourRecord {
                    t: state.t,
                    close_i: action.close_i,
                    open_j: action.open_j,
                    cost: out.info.cost(),
                    loss_kw: out.info.loss_kw,
                    switch_cost: out.info.switch_cost,
                    penalty: out.info.penalty,
                    converged: true,
                };
                state = out.next;
                rec
            }
            Err(DnrError::NonConvergence { .. }) => {
                log::warn!("hour {}: action ({}, {}) did not converge; charged the fallback cost", state.t, action.close_i, action.open_j);
                non_converged += 1;
                let rec = HourRecord {
                    t: state.t,
                    close_i: action.close_i,
                    open_j: action.open_j,
                    cost: fallback_cost,
                    loss_kw: f64::NAN,
                    switch_cost: 0.0,
                    penalty: 0.0,
                    converged: false,
                };
                state = DnrState { injections: env.series[state.t + 1].clone(), config: state.config, t: state.t + 1 };
                rec
            }
            Err(e) => return Err(e),
        };
        total_cost += record.cost;
        hourly.push(record);
    }
    Ok(EvalResult { total_cost, hourly, non_converged, latency: decision_time / hours.max(1) as f64 })
}

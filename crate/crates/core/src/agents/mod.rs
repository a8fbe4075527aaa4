//! Offline learners over a fixed transition batch: BCSAC, its entropy-only
//! SAC variant, DQN, and greedy evaluation on a held-out week.
//!
//! Critics take the state features followed by a one-hot of the closed
//! switch `i` and output one value per opened switch `j`. Actors output
//! m*m logits reshaped to the pair table and pass through the masked softmax.

mod bcsac;
mod dqn;
mod eval;
mod hyper;

pub use bcsac::{
    actor_surrogate_and_grad, expected_actor_gradient, suggest_temperature, train_bcsac, train_sac,
    BcsacModel, BcsacStats, SampledAction, TrainRun,
};
pub use dqn::{train_dqn, DqnModel, DqnRun, DqnStats};
pub use eval::{
    evaluate_weekly_cost, ActorPolicy, ControllerPolicy, DqnPolicy, EvalResult, HourRecord, Policy,
    ReplayPolicy, StayPolicy,
};
pub use hyper::{AgentHyper, DqnHyper, HyperTable, SharedHyper};

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::cvae::{floored_log, CvaeModel};
use crate::env::{Dataset, DnrAction};
use crate::nn::{Checkpoint, Mlp};
use crate::topology::SwitchPairMask;
use crate::{DnrError, Result};

/// Transition batch laid out for minibatch training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub m: usize,
    pub state_dim: usize,
    pub s: Array2<f64>,
    pub s_next: Array2<f64>,
    pub actions: Vec<DnrAction>,
    /// Scaled rewards.
    pub rewards: Vec<f64>,
    /// Flat feasible cells of each state's mask, ascending.
    pub feasible: Vec<Vec<usize>>,
    pub feasible_next: Vec<Vec<usize>>,
}

impl PreparedData {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(DnrError::Validation("empty transition batch".into()));
        }
        let n = data.len();
        let d = data.header.state_dim;
        let mut s = Array2::zeros((n, d));
        let mut s_next = Array2::zeros((n, d));
        for (k, t) in data.transitions.iter().enumerate() {
            if t.s.len() != d || t.s_next.len() != d {
                return Err(DnrError::Validation(format!("transition {k} has the wrong feature width")));
            }
            s.row_mut(k).assign(&ndarray::ArrayView1::from(&t.s[..]));
            s_next.row_mut(k).assign(&ndarray::ArrayView1::from(&t.s_next[..]));
        }
        let tr = &data.transitions;
        Self::new(
            data.header.m,
            s,
            s_next,
            tr.iter().map(|t| t.action).collect(),
            tr.iter().map(|t| t.reward).collect(),
            tr.iter().map(|t| &t.mask).collect::<Vec<_>>().as_slice(),
            tr.iter().map(|t| &t.mask_next).collect::<Vec<_>>().as_slice(),
        )
    }

    pub fn new(
        m: usize,
        s: Array2<f64>,
        s_next: Array2<f64>,
        actions: Vec<DnrAction>,
        rewards: Vec<f64>,
        masks: &[&SwitchPairMask],
        masks_next: &[&SwitchPairMask],
    ) -> Result<Self> {
        let n = s.nrows();
        if [s_next.nrows(), actions.len(), rewards.len(), masks.len(), masks_next.len()].iter().any(|&l| l != n) {
            return Err(DnrError::Validation("transition columns have different lengths".into()));
        }
        for (k, (a, mask)) in actions.iter().zip(masks).enumerate() {
            if !mask.contains(a.close_i, a.open_j) {
                return Err(DnrError::Contract(format!("transition {k}: action outside its mask")));
            }
            if !rewards[k].is_finite() {
                return Err(DnrError::NonFinite(format!("transition {k}: reward is not finite")));
            }
        }
        Ok(PreparedData {
            m,
            state_dim: s.ncols(),
            s,
            s_next,
            actions,
            rewards,
            feasible: masks.iter().map(|m| m.flat_indices()).collect(),
            feasible_next: masks_next.iter().map(|m| m.flat_indices()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        use rand::RngExt;
        (0..batch).map(|_| rng.random_range(0..self.len())).collect()
    }
}

/// log π^b over each state's feasible cells, aligned with
/// [`PreparedData::feasible`].
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorTable {
    pub log_probs: Vec<Vec<f64>>,
}

impl BehaviorTable {
    pub fn uniform(data: &PreparedData) -> Self {
        BehaviorTable {
            log_probs: data
                .feasible
                .iter()
                .map(|f| vec![-(f.len() as f64).ln(); f.len()])
                .collect(),
        }
    }

    /// From dense m*m distributions, one per state, floored before the log.
    pub fn from_distributions(data: &PreparedData, dists: &[Vec<f64>]) -> Result<Self> {
        if dists.len() != data.len() {
            return Err(DnrError::Validation("one behavior distribution per state is required".into()));
        }
        Ok(BehaviorTable {
            log_probs: data
                .feasible
                .iter()
                .zip(dists)
                .map(|(f, d)| f.iter().map(|&k| floored_log(d[k])).collect())
                .collect(),
        })
    }

    /// Marginal of the CVAE decoder with `samples` prior draws per state,
    /// drawn once here and held fixed during training.
    pub fn from_cvae<R: Rng + ?Sized>(model: &CvaeModel, data: &PreparedData, samples: usize, rng: &mut R) -> Result<Self> {
        if model.m != data.m || model.state_dim != data.state_dim {
            return Err(DnrError::Validation("CVAE was trained for a different feeder".into()));
        }
        let mut log_probs = Vec::with_capacity(data.len());
        for k in 0..data.len() {
            let row = data.s.row(k);
            let mask = SwitchPairMask::from_pairs(data.m, data.feasible[k].iter().map(|&f| (f / data.m, f % data.m)).collect());
            let dist = model.behavior_distribution(row.as_slice().unwrap(), &mask, samples, rng)?;
            log_probs.push(data.feasible[k].iter().map(|&f| floored_log(dist[f])).collect());
        }
        Ok(BehaviorTable { log_probs })
    }

    pub fn log_prob(&self, state: usize, pos: usize) -> f64 {
        self.log_probs[state][pos]
    }
}

/// Critic rows `s ⊕ onehot(i)` for the given states and closed switches.
pub(crate) fn critic_input(states: ArrayView2<f64>, rows: &[usize], closes: &[usize], m: usize) -> Array2<f64> {
    let d = states.ncols();
    let mut x = Array2::zeros((rows.len(), d + m));
    for (r, (&k, &i)) in rows.iter().zip(closes).enumerate() {
        x.slice_mut(s![r, ..d]).assign(&states.row(k));
        x[[r, d + i]] = 1.0;
    }
    x
}

/// Rows of `states` selected by `rows`.
pub(crate) fn gather(states: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    states.select(ndarray::Axis(0), rows)
}

/// Mean squared error of `net` outputs at `(row, cols[row])` against
/// `targets`, with its parameter gradient.
pub fn regression_loss_and_grad(net: &Mlp, x: ArrayView2<f64>, cols: &[usize], targets: &[f64]) -> Result<(f64, Mlp)> {
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(DnrError::NonFinite("regression target is not finite; batch rejected".into()));
    }
    let (out, tape) = net.forward_tape(x);
    let n = targets.len() as f64;
    let mut d = Array2::zeros(out.dim());
    let mut loss = 0.0;
    for (r, (&c, &y)) in cols.iter().zip(targets).enumerate() {
        let e = out[[r, c]] - y;
        loss += e * e / n;
        d[[r, c]] = 2.0 * e / n;
    }
    let mut grads = net.zeros_like();
    net.backward_into(&tape, d, &mut grads, false);
    Ok((loss, grads))
}

pub(crate) fn model_from(ckpt: &Checkpoint, name: &str) -> Result<Mlp> {
    ckpt.model(name).cloned()
}

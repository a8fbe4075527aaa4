//! Exact finite-MDP versions of the KL-regularized (batch-constrained) soft
//! policy evaluation, improvement and iteration, plus extrapolation error of
//! an empirical MDP built from sampled transitions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use serde::Serialize;

use crate::{DnrError, Result};

/// Finite MDP with dense transition tensor `p[(s*A + a)*S + s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub p: Vec<f64>,
    /// `r[s*A + a]`.
    pub r: Vec<f64>,
    pub gamma: f64,
}

impl FiniteMdp {
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>, r: Vec<f64>, gamma: f64) -> Result<Self> {
        let mdp = FiniteMdp { n_states, n_actions, p, r, gamma };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 || self.p.len() != s * a * s || self.r.len() != s * a {
            return Err(DnrError::Validation("transition or reward table has the wrong shape".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(DnrError::Validation(format!("discount {} outside [0, 1)", self.gamma)));
        }
        for row in self.p.chunks(s) {
            if row.iter().any(|&v| !(v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(DnrError::Validation("transition row is not a probability vector".into()));
            }
        }
        if self.r.iter().any(|v| !v.is_finite()) {
            return Err(DnrError::NonFinite("reward table".into()));
        }
        Ok(())
    }

    /// Deterministic MDP taking `(s, a)` to `next[s*A + a]`.
    pub fn deterministic(n_states: usize, n_actions: usize, next: &[usize], r: Vec<f64>, gamma: f64) -> Result<Self> {
        let mut p = vec![0.0; n_states * n_actions * n_states];
        for (k, &s2) in next.iter().enumerate() {
            if s2 >= n_states {
                return Err(DnrError::Validation(format!("successor {s2} out of range")));
            }
            p[k * n_states + s2] = 1.0;
        }
        Self::new(n_states, n_actions, p, r, gamma)
    }

    /// Random rewards in [-1, 1] and transition rows with random sparsity.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let mut row: Vec<f64> = (0..n_states)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
                .collect();
            let hit = rng.random_range(0..n_states);
            row[hit] += 0.1;
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
            let drift = 1.0 - row.iter().sum::<f64>();
            row[hit] += drift;
            p.extend(row);
        }
        let r = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        FiniteMdp { n_states, n_actions, p, r, gamma }
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + s2]
    }

    fn row(&self, s: usize, a: usize) -> &[f64] {
        let k = (s * self.n_actions + a) * self.n_states;
        &self.p[k..k + self.n_states]
    }
}

/// Stochastic policy table `probs[s*A + a]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        TabularPolicy { n_states: actions.len(), n_actions, probs }
    }

    /// Full-support random rows.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let row: Vec<f64> = (0..n_actions).map(|_| 0.05 + rng.random::<f64>()).collect();
            let total: f64 = row.iter().sum();
            probs.extend(row.iter().map(|v| v / total));
        }
        TabularPolicy { n_states, n_actions, probs }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.n_states * self.n_actions {
            return Err(DnrError::Validation("policy table has the wrong shape".into()));
        }
        for s in 0..self.n_states {
            let row = self.row(s);
            if row.iter().any(|&v| !(v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(DnrError::Validation(format!("policy row {s} is not a probability vector")));
            }
        }
        Ok(())
    }

    /// Largest total-variation distance between rows.
    pub fn max_tv(&self, other: &TabularPolicy) -> f64 {
        (0..self.n_states)
            .map(|s| 0.5 * self.row(s).iter().zip(other.row(s)).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// KL(π(.|s) || π^b(.|s)); infinite divergence is a contract violation.
pub fn kl_row(pi: &[f64], pb: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (&p, &b) in pi.iter().zip(pb) {
        if p > 0.0 {
            if b <= 0.0 {
                return Err(DnrError::Contract("policy puts mass outside the behavior support".into()));
            }
            kl += p * (p.ln() - b.ln());
        }
    }
    Ok(kl)
}

fn kl_table(pi: &TabularPolicy, pb: &TabularPolicy) -> Result<Vec<f64>> {
    (0..pi.n_states).map(|s| kl_row(pi.row(s), pb.row(s))).collect()
}

/// v(s) = E_π[q(s, .)] − τ KL(π(.|s) || π^b(.|s)).
pub fn soft_values(q: &[f64], pi: &TabularPolicy, pb: &TabularPolicy, tau: f64) -> Result<Vec<f64>> {
    let kl = kl_table(pi, pb)?;
    let na = pi.n_actions;
    Ok((0..pi.n_states)
        .map(|s| pi.row(s).iter().zip(&q[s * na..(s + 1) * na]).map(|(p, v)| p * v).sum::<f64>() - tau * kl[s])
        .collect())
}

/// One application of the KL-regularized evaluation operator.
pub fn kl_backup(mdp: &FiniteMdp, q: &[f64], pi: &TabularPolicy, pb: &TabularPolicy, tau: f64) -> Result<Vec<f64>> {
    let v = soft_values(q, pi, pb, tau)?;
    Ok(backup_with_values(mdp, &v))
}

fn backup_with_values(mdp: &FiniteMdp, v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(mdp.r.len());
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let ev: f64 = mdp.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
            out.push(mdp.r[s * mdp.n_actions + a] + mdp.gamma * ev);
        }
    }
    out
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Iterates the backup from zero until successive iterates differ by less
/// than `tol`; returns the iterate and the iteration count.
pub fn evaluate_policy_fixed_point(mdp: &FiniteMdp, pi: &TabularPolicy, pb: &TabularPolicy, tau: f64, tol: f64) -> Result<(Vec<f64>, usize)> {
    let mut q = vec![0.0; mdp.r.len()];
    let mut k = 0;
    loop {
        let next = kl_backup(mdp, &q, pi, pb, tau)?;
        k += 1;
        let change = sup_distance(&next, &q);
        q = next;
        if change < tol {
            return Ok((q, k));
        }
    }
}

/// Direct solve of (I − γ P^π) q = r^π.
pub fn evaluate_policy_linear(mdp: &FiniteMdp, pi: &TabularPolicy, pb: &TabularPolicy, tau: f64) -> Result<Vec<f64>> {
    let kl = kl_table(pi, pb)?;
    linear_evaluation(mdp, pi, &kl, tau, &mdp.r)
}

/// Solves q = r + γ P (E_π q − τ kl) over the transition rows of `mdp`,
/// which may be substochastic.
fn linear_evaluation(mdp: &FiniteMdp, pi: &TabularPolicy, kl: &[f64], tau: f64, r: &[f64]) -> Result<Vec<f64>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let mut lhs = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            let k = s * na + a;
            let mut aug = r[k];
            for (s2, &p) in mdp.row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                aug -= mdp.gamma * p * tau * kl[s2];
                for (a2, &w) in pi.row(s2).iter().enumerate() {
                    lhs[(k, s2 * na + a2)] -= mdp.gamma * p * w;
                }
            }
            rhs[k] = aug;
        }
    }
    let sol = lhs.lu().solve(&rhs).ok_or_else(|| DnrError::Contract("singular evaluation system".into()))?;
    Ok(sol.iter().copied().collect())
}

/// Largest residual of the regularized Bellman equations for (q, v).
pub fn bellman_residual(mdp: &FiniteMdp, q: &[f64], pi: &TabularPolicy, pb: &TabularPolicy, tau: f64) -> Result<f64> {
    let v = soft_values(q, pi, pb, tau)?;
    let kl = kl_table(pi, pb)?;
    let q_eq = sup_distance(q, &backup_with_values(mdp, &v));
    let na = mdp.n_actions;
    let mut v_eq: f64 = 0.0;
    for s in 0..mdp.n_states {
        let mut rhs = -tau * kl[s];
        for a in 0..na {
            let ev: f64 = mdp.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
            rhs += pi.row(s)[a] * (mdp.r[s * na + a] + mdp.gamma * ev);
        }
        v_eq = v_eq.max((v[s] - rhs).abs());
    }
    Ok(q_eq.max(v_eq))
}

/// Exact maximizer of E_π̃[q] − τ KL(π̃ || π^b) per state:
/// π′ ∝ π^b exp(q/τ). For τ ≤ 0 the argmax over the behavior support, ties
/// split evenly.
pub fn improve_policy(q: &[f64], pb: &TabularPolicy, tau: f64) -> TabularPolicy {
    let na = pb.n_actions;
    let mut probs = Vec::with_capacity(q.len());
    for s in 0..pb.n_states {
        let b = pb.row(s);
        let qs = &q[s * na..(s + 1) * na];
        let support: Vec<usize> = (0..na).filter(|&a| b[a] > 0.0).collect();
        let mut row = vec![0.0; na];
        if tau > 0.0 {
            let logits: Vec<f64> = support.iter().map(|&a| b[a].ln() + qs[a] / tau).collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for (&a, l) in support.iter().zip(&logits) {
                row[a] = (l - top).exp() / total;
            }
        } else {
            let top = support.iter().map(|&a| qs[a]).fold(f64::NEG_INFINITY, f64::max);
            let best: Vec<usize> = support.iter().copied().filter(|&a| qs[a] == top).collect();
            for &a in &best {
                row[a] = 1.0 / best.len() as f64;
            }
        }
        probs.extend(row);
    }
    TabularPolicy { n_states: pb.n_states, n_actions: na, probs }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyIterationResult {
    pub policy: TabularPolicy,
    pub q: Vec<f64>,
    /// Soft state values after each evaluation.
    pub v_trace: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Alternates exact evaluation and improvement from `init` (π^b if absent)
/// until the policy moves by less than `tol` in total variation.
pub fn bc_soft_policy_iteration(mdp: &FiniteMdp, pb: &TabularPolicy, tau: f64, tol: f64, init: Option<&TabularPolicy>) -> Result<PolicyIterationResult> {
    const MAX_ITERATIONS: usize = 10_000;
    let mut pi = init.cloned().unwrap_or_else(|| pb.clone());
    let mut v_trace = Vec::new();
    for k in 1..=MAX_ITERATIONS {
        let q = evaluate_policy_linear(mdp, &pi, pb, tau)?;
        v_trace.push(soft_values(&q, &pi, pb, tau)?);
        let next = improve_policy(&q, pb, tau);
        if next.max_tv(&pi) < tol {
            let q = evaluate_policy_linear(mdp, &next, pb, tau)?;
            return Ok(PolicyIterationResult { policy: next, q, v_trace, iterations: k });
        }
        pi = next;
    }
    Err(DnrError::Contract(format!("policy iteration did not settle in {MAX_ITERATIONS} iterations")))
}

/// Every deterministic policy supported by `pb`, in lexicographic order.
pub fn deterministic_policies(pb: &TabularPolicy) -> Vec<TabularPolicy> {
    let supports: Vec<Vec<usize>> = (0..pb.n_states)
        .map(|s| (0..pb.n_actions).filter(|&a| pb.row(s)[a] > 0.0).collect())
        .collect();
    let mut out = Vec::new();
    let mut choice = vec![0usize; pb.n_states];
    if supports.iter().any(|s| s.is_empty()) {
        return out;
    }
    loop {
        let actions: Vec<usize> = choice.iter().enumerate().map(|(s, &c)| supports[s][c]).collect();
        out.push(TabularPolicy::deterministic(pb.n_actions, &actions));
        let mut s = 0;
        loop {
            if s == pb.n_states {
                return out;
            }
            choice[s] += 1;
            if choice[s] < supports[s].len() {
                break;
            }
            choice[s] = 0;
            s += 1;
        }
    }
}

/// One sampled transition (s, a, r, s′).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledTransition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtrapolationReport {
    /// q_π − q_π^D per (s, a).
    pub per_pair: Vec<f64>,
    /// Pairs absent from the batch; their empirical rows are terminal with
    /// zero reward.
    pub missing: Vec<bool>,
    /// Normalized discounted state visitation of π in the true MDP from a
    /// uniform start.
    pub visitation: Vec<f64>,
    pub epsilon: f64,
}

/// Normalized discounted visitation (1 − γ) ρ₀ᵀ (I − γ P_π)⁻¹ with uniform ρ₀.
pub fn discounted_visitation(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    let ns = mdp.n_states;
    let mut lhs = DMatrix::<f64>::identity(ns, ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions {
            let w = pi.row(s)[a];
            for (s2, &p) in mdp.row(s, a).iter().enumerate() {
                lhs[(s2, s)] -= mdp.gamma * w * p;
            }
        }
    }
    let rho = DVector::from_element(ns, (1.0 - mdp.gamma) / ns as f64);
    let mu = lhs.lu().solve(&rho).ok_or_else(|| DnrError::Contract("singular visitation system".into()))?;
    Ok(mu.iter().copied().collect())
}

/// Extrapolation error of π between the true MDP and the empirical MDP of
/// `batch` (unregularized action values).
pub fn extrapolation_error(mdp: &FiniteMdp, batch: &[SampledTransition], pi: &TabularPolicy) -> Result<ExtrapolationReport> {
    if batch.is_empty() {
        return Err(DnrError::Validation("empty transition batch".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut counts = vec![0.0; ns * na * ns];
    let mut visits = vec![0usize; ns * na];
    let mut reward_sum = vec![0.0; ns * na];
    for t in batch {
        if t.s >= ns || t.a >= na || t.s_next >= ns {
            return Err(DnrError::Validation("transition index out of range".into()));
        }
        let k = t.s * na + t.a;
        counts[k * ns + t.s_next] += 1.0;
        visits[k] += 1;
        reward_sum[k] += t.r;
    }
    let mut p_hat = vec![0.0; ns * na * ns];
    let mut r_hat = vec![0.0; ns * na];
    for k in 0..ns * na {
        if visits[k] > 0 {
            for s2 in 0..ns {
                p_hat[k * ns + s2] = counts[k * ns + s2] / visits[k] as f64;
            }
            r_hat[k] = reward_sum[k] / visits[k] as f64;
        }
    }
    let zero_kl = vec![0.0; ns];
    let q_true = linear_evaluation(mdp, pi, &zero_kl, 0.0, &mdp.r)?;
    let empirical = FiniteMdp { n_states: ns, n_actions: na, p: p_hat, r: r_hat.clone(), gamma: mdp.gamma };
    let q_batch = linear_evaluation(&empirical, pi, &zero_kl, 0.0, &r_hat)?;
    let per_pair: Vec<f64> = q_true.iter().zip(&q_batch).map(|(a, b)| a - b).collect();
    let visitation = discounted_visitation(mdp, pi)?;
    let epsilon = (0..ns)
        .map(|s| visitation[s] * (0..na).map(|a| pi.row(s)[a] * per_pair[s * na + a].abs()).sum::<f64>())
        .sum();
    Ok(ExtrapolationReport { per_pair, missing: visits.iter().map(|&v| v == 0).collect(), visitation, epsilon })
}

/// Worst-case residuals of the theory checks over random instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub instances: usize,
    /// max over pairs of ‖Tq − Tq′‖ / ‖q − q′‖ − γ.
    pub contraction_excess: f64,
    /// max |iterated − linear-solve| evaluation.
    pub oracle_gap: f64,
    /// min over (s, a) of q_{π′} − q_π.
    pub improvement_margin: f64,
    /// min over enumerated deterministic d of q_{π*} − q_d.
    pub optimality_margin: f64,
    /// Instances with |S|·|A| ≤ 12 on which the optimality check ran.
    pub optimality_instances: usize,
}

impl TheoryReport {
    pub fn contraction_ok(&self) -> bool {
        self.contraction_excess <= 1e-12
    }

    pub fn oracle_ok(&self) -> bool {
        self.oracle_gap <= 1e-9
    }

    pub fn improvement_ok(&self) -> bool {
        self.improvement_margin >= -1e-10
    }

    pub fn optimality_ok(&self) -> bool {
        self.optimality_margin >= -1e-9
    }

    pub fn passed(&self) -> bool {
        self.contraction_ok() && self.oracle_ok() && self.improvement_ok() && self.optimality_ok()
    }
}

/// Runs the contraction, oracle, improvement and optimality checks on
/// `instances` random MDPs with |S| ≤ 6, |A| ≤ 4, τ ∈ [0.01, 10].
pub fn verify_theory<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> Result<TheoryReport> {
    let mut report = TheoryReport {
        instances,
        contraction_excess: f64::NEG_INFINITY,
        oracle_gap: 0.0,
        improvement_margin: f64::INFINITY,
        optimality_margin: f64::INFINITY,
        optimality_instances: 0,
    };
    for _ in 0..instances {
        let ns = rng.random_range(1..=6);
        let na = rng.random_range(1..=4);
        let gamma = rng.random_range(0.0..0.95);
        let tau = rng.random_range(0.01..10.0);
        let mdp = FiniteMdp::random(ns, na, gamma, rng);
        let pb = TabularPolicy::random(ns, na, rng);
        let pi = TabularPolicy::random(ns, na, rng);

        let q1: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-10.0..10.0)).collect();
        let q2: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-10.0..10.0)).collect();
        let d = sup_distance(&q1, &q2);
        if d > 0.0 {
            let t = sup_distance(&kl_backup(&mdp, &q1, &pi, &pb, tau)?, &kl_backup(&mdp, &q2, &pi, &pb, tau)?);
            report.contraction_excess = report.contraction_excess.max(t / d - gamma);
        }

        let exact = evaluate_policy_linear(&mdp, &pi, &pb, tau)?;
        let (iterated, _) = evaluate_policy_fixed_point(&mdp, &pi, &pb, tau, 1e-12)?;
        report.oracle_gap = report.oracle_gap.max(sup_distance(&exact, &iterated));

        let improved = evaluate_policy_linear(&mdp, &improve_policy(&exact, &pb, tau), &pb, tau)?;
        let margin = improved.iter().zip(&exact).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
        report.improvement_margin = report.improvement_margin.min(margin);

        if ns * na <= 12 {
            report.optimality_instances += 1;
            let best = bc_soft_policy_iteration(&mdp, &pb, tau, 1e-13, None)?;
            for det in deterministic_policies(&pb) {
                let qd = evaluate_policy_linear(&mdp, &det, &pb, tau)?;
                let m = best.q.iter().zip(&qd).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
                report.optimality_margin = report.optimality_margin.min(m);
            }
        }
    }
    Ok(report)
}

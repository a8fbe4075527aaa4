//! Hourly reconfiguration MDP: exogenous injection replay, branch-exchange
//! actions, the loss/switching/voltage reward and neural state features.

use std::cell::Cell;
use std::f64::consts::TAU;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::grid::{
    solve_power_flow_with, total_losses, voltage_violation, InjectionFrame, Network,
    PowerFlowOptions,
};
use crate::topology::{apply_pair, is_radial, switch_pair_mask, Configuration, SwitchPairMask};
use crate::{DnrError, Result};

pub const HOURS_PER_WEEK: usize = 168;
pub const DATASET_SCHEMA_VERSION: u32 = 1;

thread_local! {
    static ENV_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`DnrEnv::step`] calls made on the current thread.
pub fn env_step_count() -> u64 {
    ENV_STEPS.with(|c| c.get())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnrState {
    pub injections: InjectionFrame,
    pub config: Configuration,
    pub t: usize,
}

/// Close `close_i`, open `open_j`; equal indices keep the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DnrAction {
    pub close_i: usize,
    pub open_j: usize,
}

impl DnrAction {
    pub fn new(close_i: usize, open_j: usize) -> Self {
        DnrAction { close_i, open_j }
    }

    pub fn is_stay(&self) -> bool {
        self.close_i == self.open_j
    }

    pub fn flat(&self, m: usize) -> usize {
        self.close_i * m + self.open_j
    }

    pub fn from_flat(k: usize, m: usize) -> Self {
        DnrAction::new(k / m, k % m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Energy price, $/kWh.
    pub c_loss: f64,
    /// Cost per switch operation, $.
    pub c_switch: f64,
    /// Penalty per p.u. of voltage-band violation, $.
    pub lambda: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub reward_scale: f64,
    pub dt_hours: f64,
}

impl RewardParams {
    /// Retail price 0.13 $/kWh, band [0.9, 1.1], λ equal to the energy price,
    /// reward scale 500, and the feeder's own switching cost.
    pub fn standard(c_switch: f64) -> Self {
        RewardParams {
            c_loss: 0.13,
            c_switch,
            lambda: 0.13,
            v_lo: 0.9,
            v_hi: 1.1,
            reward_scale: 500.0,
            dt_hours: 1.0,
        }
    }

    pub fn for_network(net: &Network) -> Result<Self> {
        let cs = net.switch_cost().ok_or_else(|| {
            DnrError::Config(format!("feeder {} carries no switching cost", net.name))
        })?;
        let p = RewardParams::standard(cs);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.c_loss, self.c_switch, self.lambda, self.v_lo, self.v_hi, self.reward_scale, self.dt_hours];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(DnrError::Config(format!("reward parameters must be positive: {self:?}")));
        }
        if self.v_lo >= self.v_hi {
            return Err(DnrError::Config("voltage band lower bound must be below the upper bound".into()));
        }
        Ok(())
    }
}

/// Unscaled reward components of one transition, in $.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub loss_kw: f64,
    pub loss_cost: f64,
    pub switch_cost: f64,
    pub penalty: f64,
    pub violation_pu: f64,
}

impl StepInfo {
    /// R = -(loss cost) - (switch cost) - (penalty).
    pub fn reward(&self) -> f64 {
        -self.loss_cost - self.switch_cost - self.penalty
    }

    pub fn cost(&self) -> f64 {
        -self.reward()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next: DnrState,
    pub reward: f64,
    pub info: StepInfo,
}

/// Prices `action` from `config` under one injection frame on `net`, which may
/// be a perturbed copy of the true feeder.
pub fn price_action(
    net: &Network,
    params: &RewardParams,
    monitored: &[usize],
    frame: &InjectionFrame,
    config: &Configuration,
    mask: &SwitchPairMask,
    action: DnrAction,
) -> Result<(Configuration, StepInfo)> {
    let next = apply_pair(config, mask, action.close_i, action.open_j)?;
    let sol = solve_power_flow_with(net, &next, frame, PowerFlowOptions::default())?;
    if !sol.converged {
        return Err(DnrError::NonConvergence {
            iterations: sol.iterations,
            last_change: sol.max_mismatch,
        });
    }
    let loss_kw = total_losses(&sol)?;
    let violation_pu = voltage_violation(&sol, params.v_lo, params.v_hi, monitored)?;
    let toggles = config.hamming(&next) as f64;
    let info = StepInfo {
        loss_kw,
        loss_cost: params.c_loss * loss_kw * params.dt_hours,
        switch_cost: params.c_switch * toggles,
        penalty: params.lambda * violation_pu,
        violation_pu,
    };
    Ok((next, info))
}

/// Replays an hourly injection series on a fixed feeder.
#[derive(Debug, Clone)]
pub struct DnrEnv {
    pub net: Network,
    pub series: Arc<Vec<InjectionFrame>>,
    pub params: RewardParams,
    /// Buses with voltage measurement; every bus by default.
    pub monitored: Vec<usize>,
}

impl DnrEnv {
    pub fn new(net: Network, series: Arc<Vec<InjectionFrame>>, params: RewardParams) -> Result<Self> {
        params.validate()?;
        if let Some(bad) = series.iter().find(|f| f.p.len() != net.bus_count() || f.q.len() != net.bus_count()) {
            return Err(DnrError::Validation(format!(
                "injection frame at hour {} does not match the {}-bus feeder",
                bad.t,
                net.bus_count()
            )));
        }
        let monitored = (0..net.bus_count()).collect();
        Ok(DnrEnv { net, series, params, monitored })
    }

    pub fn horizon(&self) -> usize {
        self.series.len()
    }

    pub fn reset(&self, initial: &Configuration, t0: usize) -> Result<DnrState> {
        if t0 >= self.series.len() {
            return Err(DnrError::Validation(format!(
                "start hour {t0} beyond series of length {}",
                self.series.len()
            )));
        }
        if !is_radial(&self.net, initial) {
            return Err(DnrError::Validation("initial configuration is not radial".into()));
        }
        Ok(DnrState {
            injections: self.series[t0].clone(),
            config: initial.clone(),
            t: t0,
        })
    }

    pub fn mask(&self, state: &DnrState) -> Result<SwitchPairMask> {
        switch_pair_mask(&self.net, &state.config)
    }

    /// Prices `action` on the true feeder without advancing time.
    pub fn price(&self, state: &DnrState, mask: &SwitchPairMask, action: DnrAction) -> Result<(Configuration, StepInfo)> {
        price_action(&self.net, &self.params, &self.monitored, &state.injections, &state.config, mask, action)
    }

    pub fn step(&self, state: &DnrState, action: DnrAction) -> Result<StepOutcome> {
        let mask = self.mask(state)?;
        self.step_masked(state, &mask, action)
    }

    /// Like [`DnrEnv::step`] with a precomputed mask for `state`.
    pub fn step_masked(&self, state: &DnrState, mask: &SwitchPairMask, action: DnrAction) -> Result<StepOutcome> {
        ENV_STEPS.with(|c| c.set(c.get() + 1));
        let t_next = state.t + 1;
        if t_next >= self.series.len() {
            return Err(DnrError::Validation(format!("series exhausted at hour {}", state.t)));
        }
        let (config, info) = self.price(state, mask, action)?;
        debug_assert!(is_radial(&self.net, &config));
        Ok(StepOutcome {
            next: DnrState {
                injections: self.series[t_next].clone(),
                config,
                t: t_next,
            },
            reward: info.reward(),
            info,
        })
    }
}

/// Per-bus z-score statistics of the load-bus injections in a training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub buses: Vec<usize>,
    pub p_mean: Vec<f64>,
    pub p_std: Vec<f64>,
    pub q_mean: Vec<f64>,
    pub q_std: Vec<f64>,
}

impl Normalization {
    /// Population statistics; a zero spread is replaced by 1.
    pub fn fit(frames: &[InjectionFrame], buses: &[usize]) -> Result<Self> {
        if frames.is_empty() {
            return Err(DnrError::Validation("cannot normalize an empty batch".into()));
        }
        let n = frames.len() as f64;
        let stat = |get: &dyn Fn(&InjectionFrame) -> f64| {
            let mean = frames.iter().map(get).sum::<f64>() / n;
            let var = frames.iter().map(|f| (get(f) - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        };
        let mut norm = Normalization {
            buses: buses.to_vec(),
            p_mean: Vec::new(),
            p_std: Vec::new(),
            q_mean: Vec::new(),
            q_std: Vec::new(),
        };
        for &b in buses {
            let (pm, ps) = stat(&|f| f.p[b]);
            let (qm, qs) = stat(&|f| f.q[b]);
            norm.p_mean.push(pm);
            norm.p_std.push(ps);
            norm.q_mean.push(qm);
            norm.q_std.push(qs);
        }
        Ok(norm)
    }

    pub fn feature_dim(&self, m: usize) -> usize {
        2 * self.buses.len() + m + 4
    }
}

/// Normalized p and q of the load buses, the 0/1 switch statuses, then
/// (sin, cos) of the hour of day and of the day of week.
pub fn encode_state(state: &DnrState, norms: &Normalization) -> Vec<f64> {
    let mut out = Vec::with_capacity(norms.feature_dim(state.config.len()));
    for (k, &b) in norms.buses.iter().enumerate() {
        out.push((state.injections.p[b] - norms.p_mean[k]) / norms.p_std[k]);
    }
    for (k, &b) in norms.buses.iter().enumerate() {
        out.push((state.injections.q[b] - norms.q_mean[k]) / norms.q_std[k]);
    }
    out.extend(state.config.as_slice().iter().map(|&c| if c { 1.0 } else { 0.0 }));
    let hour = (state.t % 24) as f64 / 24.0;
    let day = ((state.t / 24) % 7) as f64 / 7.0;
    out.extend([(TAU * hour).sin(), (TAU * hour).cos(), (TAU * day).sin(), (TAU * day).cos()]);
    out
}

/// Which branch of the behavior mixture produced an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Model,
    Fixed,
    Random,
    Unknown,
}

impl Scenario {
    fn code(self) -> &'static str {
        match self {
            Scenario::Model => "mod",
            Scenario::Fixed => "fix",
            Scenario::Random => "rnd",
            Scenario::Unknown => "-",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mod" => Scenario::Model,
            "fix" => Scenario::Fixed,
            "rnd" => Scenario::Random,
            "-" => Scenario::Unknown,
            other => return Err(DnrError::Validation(format!("unknown scenario tag {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub s: Vec<f64>,
    pub action: DnrAction,
    /// Reward divided by the reward scale.
    pub reward: f64,
    pub info: StepInfo,
    pub s_next: Vec<f64>,
    pub config: Configuration,
    pub config_next: Configuration,
    pub mask: SwitchPairMask,
    pub mask_next: SwitchPairMask,
    pub scenario: Scenario,
    /// The model-based controller's choice at this state, when recorded.
    pub greedy: Option<DnrAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub feeder: String,
    pub m: usize,
    pub state_dim: usize,
    pub reward_scale: f64,
    pub params: RewardParams,
    pub norms: Normalization,
    /// Scenario probabilities (model, fixed, random) of the generator.
    pub probs: Option<[f64; 3]>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Total unscaled cost of the recorded actions.
    pub fn realized_cost(&self) -> f64 {
        self.transitions.iter().map(|t| t.info.cost()).sum()
    }

    /// Writes the JSON header line followed by CSV rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "{}", serde_json::to_string(&self.header)?)?;
        let mut w = csv::Writer::from_writer(file);
        let d = self.header.state_dim;
        let mut head: Vec<String> = [
            "t", "close_i", "open_j", "reward", "loss_kw", "loss_cost", "switch_cost", "penalty",
            "violation_pu", "scenario", "greedy_i", "greedy_j", "cfg", "cfg_next",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        head.extend((0..d).map(|k| format!("s_{k}")));
        head.extend((0..d).map(|k| format!("sn_{k}")));
        w.write_record(&head)?;
        for tr in &self.transitions {
            let mut row = vec![
                tr.t.to_string(),
                tr.action.close_i.to_string(),
                tr.action.open_j.to_string(),
                tr.reward.to_string(),
                tr.info.loss_kw.to_string(),
                tr.info.loss_cost.to_string(),
                tr.info.switch_cost.to_string(),
                tr.info.penalty.to_string(),
                tr.info.violation_pu.to_string(),
                tr.scenario.code().to_string(),
                tr.greedy.map(|a| a.close_i.to_string()).unwrap_or_default(),
                tr.greedy.map(|a| a.open_j.to_string()).unwrap_or_default(),
                tr.config.to_bitstring(),
                tr.config_next.to_bitstring(),
            ];
            row.extend(tr.s.iter().chain(&tr.s_next).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`Dataset::save`]; masks are rebuilt from the
    /// configurations on `net`.
    pub fn load(path: &Path, net: &Network) -> Result<Dataset> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let header: DatasetHeader = serde_json::from_str(first.trim_end())?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(DnrError::Validation(format!(
                "dataset schema {} unsupported (expected {DATASET_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        if header.m != net.branch_count() {
            return Err(DnrError::Validation(format!(
                "dataset has {} switches, feeder {} has {}",
                header.m,
                net.name,
                net.branch_count()
            )));
        }
        let d = header.state_dim;
        let mut rdr = csv::Reader::from_reader(reader);
        let mut transitions = Vec::new();
        let mut mask_cache: std::collections::HashMap<Configuration, SwitchPairMask> = Default::default();
        let mut mask_for = |cfg: &Configuration| -> Result<SwitchPairMask> {
            if let Some(m) = mask_cache.get(cfg) {
                return Ok(m.clone());
            }
            let m = switch_pair_mask(net, cfg)?;
            mask_cache.insert(cfg.clone(), m.clone());
            Ok(m)
        };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| DnrError::Parse {
                line: line + 3,
                column: 0,
                message: format!("invalid {what}"),
            };
            if rec.len() != 14 + 2 * d {
                return Err(bad("row width"));
            }
            let num = |k: usize, what: &str| rec[k].parse::<f64>().map_err(|_| bad(what));
            let idx = |k: usize, what: &str| rec[k].parse::<usize>().map_err(|_| bad(what));
            let greedy = if rec[10].is_empty() {
                None
            } else {
                Some(DnrAction::new(idx(10, "greedy_i")?, idx(11, "greedy_j")?))
            };
            let config = Configuration::from_bitstring(&rec[12])?;
            let config_next = Configuration::from_bitstring(&rec[13])?;
            let mask = mask_for(&config)?;
            let mask_next = mask_for(&config_next)?;
            let action = DnrAction::new(idx(1, "close_i")?, idx(2, "open_j")?);
            if !mask.contains(action.close_i, action.open_j) {
                return Err(DnrError::RejectedAction { close: action.close_i, open: action.open_j });
            }
            let s = (0..d).map(|k| num(14 + k, "state")).collect::<Result<Vec<_>>>()?;
            let s_next = (0..d).map(|k| num(14 + d + k, "next state")).collect::<Result<Vec<_>>>()?;
            transitions.push(Transition {
                t: idx(0, "t")?,
                s,
                action,
                reward: num(3, "reward")?,
                info: StepInfo {
                    loss_kw: num(4, "loss_kw")?,
                    loss_cost: num(5, "loss_cost")?,
                    switch_cost: num(6, "switch_cost")?,
                    penalty: num(7, "penalty")?,
                    violation_pu: num(8, "violation_pu")?,
                },
                s_next,
                config,
                config_next,
                mask,
                mask_next,
                scenario: Scenario::parse(&rec[9])?,
                greedy,
            });
        }
        Ok(Dataset { header, transitions })
    }
}

/// Hourly injection series as CSV: `t, p_0.., q_0..` in p.u.
pub fn save_series(path: &Path, frames: &[InjectionFrame]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = frames.first().map_or(0, |f| f.p.len());
    let mut head = vec!["t".to_string()];
    head.extend((0..n).map(|b| format!("p_{b}")));
    head.extend((0..n).map(|b| format!("q_{b}")));
    w.write_record(&head)?;
    for f in frames {
        let mut row = vec![f.t.to_string()];
        row.extend(f.p.iter().chain(&f.q).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_series(path: &Path) -> Result<Vec<InjectionFrame>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let width = rdr.headers()?.len();
    if width < 1 || (width - 1) % 2 != 0 {
        return Err(DnrError::Validation("series header must be t, p_*, q_*".into()));
    }
    let n = (width - 1) / 2;
    let mut frames = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| DnrError::Parse { line: line + 2, column: 0, message: e.to_string() })?;
        let t = rec[0]
            .parse()
            .map_err(|_| DnrError::Parse { line: line + 2, column: 1, message: "invalid hour".into() })?;
        frames.push(InjectionFrame { t, p: vals[..n].to_vec(), q: vals[n..].to_vec() });
    }
    Ok(frames)
}

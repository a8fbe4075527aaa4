//! Historical operating data: hourly load/solar series, loading calibration,
//! the three-scenario behavior policy and transition batches.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::env::{
    encode_state, price_action, Dataset, DatasetHeader, DnrAction, DnrEnv, DnrState, Normalization,
    RewardParams, Scenario, StepOutcome, Transition, DATASET_SCHEMA_VERSION, HOURS_PER_WEEK,
};
use crate::grid::{solve_power_flow, total_losses, InjectionFrame, Network};
use crate::topology::{switch_pair_mask, Configuration, SwitchPairMask};
use crate::{seeded_rng, DnrError, Result};

/// Mixture weights of the model-based, fixed and random scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioProbs {
    pub p_mod: f64,
    pub p_fix: f64,
    pub p_rnd: f64,
}

impl ScenarioProbs {
    pub fn new(p_mod: f64, p_fix: f64, p_rnd: f64) -> Result<Self> {
        let p = ScenarioProbs { p_mod, p_fix, p_rnd };
        p.validate()?;
        Ok(p)
    }

    /// `p_mod` with the remainder split so that `p_fix / p_rnd = ratio`.
    pub fn from_ratio(p_mod: f64, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0) {
            return Err(DnrError::Config(format!("fixed/random ratio must be positive, got {ratio}")));
        }
        let rest = 1.0 - p_mod;
        ScenarioProbs::new(p_mod, rest * ratio / (1.0 + ratio), rest / (1.0 + ratio))
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.p_mod, self.p_fix, self.p_rnd];
        if v.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DnrError::Config(format!("scenario probabilities must be non-negative and sum to 1: {v:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_mod, self.p_fix, self.p_rnd]
    }
}

/// Parameters of the synthetic customer-load and solar generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticLoadSpec {
    pub weeks: usize,
    /// Mean hourly consumption of one customer, kWh.
    pub mean_kw: f64,
    /// Relative amplitude of the evening-peaking daily cycle.
    pub daily_amplitude: f64,
    /// Hour of the daily peak.
    pub peak_hour: f64,
    /// Per-customer spread of the peak hour, hours.
    pub peak_jitter_hours: f64,
    /// Relative uplift on Saturdays and Sundays.
    pub weekend_uplift: f64,
    /// Relative amplitude of the annual (winter-peaking) cycle.
    pub annual_amplitude: f64,
    /// Log-space spread of the per-customer size factor.
    pub customer_sigma: f64,
    /// Log-space spread of the hourly multiplicative noise.
    pub noise_sigma: f64,
    /// Solar peak per solar bus as a multiple of that bus's mean load.
    pub solar_peak_ratio: f64,
    /// Daily cloud attenuation is drawn from U(1 - solar_cloudiness, 1).
    pub solar_cloudiness: f64,
    pub power_factor: f64,
}

impl Default for SyntheticLoadSpec {
    fn default() -> Self {
        SyntheticLoadSpec {
            weeks: 76,
            mean_kw: 0.6,
            daily_amplitude: 0.45,
            peak_hour: 19.0,
            peak_jitter_hours: 1.5,
            weekend_uplift: 0.1,
            annual_amplitude: 0.15,
            customer_sigma: 0.35,
            noise_sigma: 0.3,
            solar_peak_ratio: 1.2,
            solar_cloudiness: 0.6,
            power_factor: 0.98,
        }
    }
}

/// Hourly per-bus consumption and solar output in kW, indexed by bus index.
/// Substation rows are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadLibrary {
    pub hours: usize,
    pub load_kw: Vec<Vec<f64>>,
    pub solar_kw: Vec<Vec<f64>>,
    pub power_factor: f64,
}

/// q/p ratio of a lagging power factor.
pub fn reactive_ratio(power_factor: f64) -> f64 {
    power_factor.acos().tan()
}

impl LoadLibrary {
    /// Injection frames for hours `[start, end)` in p.u., scaled by `beta`.
    /// Loads inject negatively; solar is at unity power factor.
    pub fn frames(&self, net: &Network, beta: f64, start: usize, end: usize) -> Vec<InjectionFrame> {
        let to_pu = beta / (net.s_base_mva * 1000.0);
        let k = reactive_ratio(self.power_factor);
        (start..end.min(self.hours))
            .map(|t| {
                let mut f = InjectionFrame::zeros(t, net.bus_count());
                for b in 0..net.bus_count() {
                    let load = self.load_kw[b][t];
                    f.p[b] = (self.solar_kw[b][t] - load) * to_pu;
                    f.q[b] = -load * k * to_pu;
                }
                f
            })
            .collect()
    }

    /// Unscaled total consumption at hour `t`, kW.
    pub fn demand_kw(&self, t: usize) -> f64 {
        self.load_kw.iter().map(|s| s[t]).sum()
    }
}

fn customers_per_bus(net: &Network) -> Result<usize> {
    net.case
        .as_ref()
        .map(|c| c.customers_per_bus)
        .filter(|&c| c > 0)
        .ok_or_else(|| DnrError::Config(format!("feeder {} has no customers-per-bus setting", net.name)))
}

fn solar_bus_indices(net: &Network) -> Result<Vec<usize>> {
    let ids = net.case.as_ref().map(|c| c.solar_buses.clone()).unwrap_or_default();
    ids.iter()
        .map(|&id| {
            net.bus_index(id)
                .ok_or_else(|| DnrError::Config(format!("solar bus {id} not in feeder {}", net.name)))
        })
        .collect()
}

/// Synthetic library: each load bus aggregates independent customers with a
/// shared daily/weekly/annual shape, a per-customer size and phase, and
/// lognormal hourly noise. Solar buses get a clear-sky bell shape with daily
/// cloud attenuation.
pub fn synthetic_library<R: Rng + ?Sized>(net: &Network, spec: &SyntheticLoadSpec, rng: &mut R) -> Result<LoadLibrary> {
    if spec.weeks == 0 || !(spec.mean_kw > 0.0) || !(spec.power_factor > 0.0 && spec.power_factor <= 1.0) {
        return Err(DnrError::Config(format!("malformed synthetic load spec: {spec:?}")));
    }
    let customers = customers_per_bus(net)?;
    let hours = spec.weeks * HOURS_PER_WEEK;
    let size = LogNormal::new(-0.5 * spec.customer_sigma.powi(2), spec.customer_sigma)
        .map_err(|e| DnrError::Config(e.to_string()))?;
    let noise = LogNormal::new(-0.5 * spec.noise_sigma.powi(2), spec.noise_sigma)
        .map_err(|e| DnrError::Config(e.to_string()))?;
    let tau = std::f64::consts::TAU;
    let mut load_kw = vec![vec![0.0; hours]; net.bus_count()];
    for &b in net.load_buses() {
        let series = &mut load_kw[b];
        for _ in 0..customers {
            let scale = spec.mean_kw * size.sample(rng);
            let peak = spec.peak_hour + rng.random_range(-1.0..=1.0) * spec.peak_jitter_hours;
            for (t, slot) in series.iter_mut().enumerate() {
                let hour = (t % 24) as f64;
                let day = (t / 24) % 7;
                let daily = 1.0 + spec.daily_amplitude * (tau * (hour - peak) / 24.0).cos();
                let weekly = if day >= 5 { 1.0 + spec.weekend_uplift } else { 1.0 };
                let annual = 1.0 + spec.annual_amplitude * (tau * t as f64 / (52.0 * HOURS_PER_WEEK as f64)).cos();
                *slot += scale * daily * weekly * annual * noise.sample(rng);
            }
        }
    }
    let mut solar_kw = vec![vec![0.0; hours]; net.bus_count()];
    let days = hours.div_ceil(24);
    let clouds: Vec<f64> = (0..days)
        .map(|_| 1.0 - spec.solar_cloudiness * rng.random::<f64>())
        .collect();
    for b in solar_bus_indices(net)? {
        let peak = spec.solar_peak_ratio * spec.mean_kw * customers as f64;
        for (t, slot) in solar_kw[b].iter_mut().enumerate() {
            let hour = (t % 24) as f64;
            let shape = if (6.0..=18.0).contains(&hour) {
                (std::f64::consts::PI * (hour - 6.0) / 12.0).sin()
            } else {
                0.0
            };
            *slot = peak * shape * clouds[t / 24];
        }
    }
    Ok(LoadLibrary {
        hours,
        load_kw,
        solar_kw,
        power_factor: spec.power_factor,
    })
}

/// Library from smart-meter CSV files with rows `(customer_id, hour, kwh)`.
///
/// Every `*.csv` file in `dir` is read. Customers are sorted by id and
/// assigned in blocks to the load buses in index order. Solar comes from the
/// synthetic generator's solar model.
pub fn ingest_library<R: Rng + ?Sized>(
    dir: &Path,
    net: &Network,
    spec: &SyntheticLoadSpec,
    rng: &mut R,
) -> Result<LoadLibrary> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut readings: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for path in &paths {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let err = |m: &str| DnrError::Parse { line: line + 2, column: 0, message: format!("{}: {m}", path.display()) };
            if rec.len() < 3 {
                return Err(err("expected customer_id, hour, kwh"));
            }
            let hour: usize = rec[1].trim().parse().map_err(|_| err("invalid hour index"))?;
            let kwh: f64 = rec[2].trim().parse().map_err(|_| err("invalid kWh value"))?;
            readings.entry(rec[0].trim().to_string()).or_default().insert(hour, kwh);
        }
    }
    let customers = customers_per_bus(net)?;
    let needed = customers * net.load_buses().len();
    if readings.len() < needed {
        return Err(DnrError::Config(format!(
            "feeder {} needs {needed} customers, data has {}",
            net.name,
            readings.len()
        )));
    }
    let hours = readings
        .values()
        .filter_map(|r| r.keys().next_back())
        .max()
        .map_or(0, |h| h + 1);
    let mut gaps = Vec::new();
    for (id, r) in readings.iter().take(needed) {
        let missing: Vec<usize> = (0..hours).filter(|h| !r.contains_key(h)).collect();
        if !missing.is_empty() {
            gaps.push(format!("{id}: {} missing (first {:?})", missing.len(), &missing[..missing.len().min(5)]));
        }
    }
    if !gaps.is_empty() {
        return Err(DnrError::Ingestion(format!("missing hours: {}", gaps.join("; "))));
    }
    let mut load_kw = vec![vec![0.0; hours]; net.bus_count()];
    let ids: Vec<&BTreeMap<usize, f64>> = readings.values().take(needed).collect();
    for (k, &b) in net.load_buses().iter().enumerate() {
        for r in &ids[k * customers..(k + 1) * customers] {
            for (h, v) in r.iter() {
                load_kw[b][*h] += v;
            }
        }
    }
    let weeks = hours.div_ceil(HOURS_PER_WEEK).max(1);
    let solar = synthetic_library(net, &SyntheticLoadSpec { weeks, ..spec.clone() }, rng)?.solar_kw;
    Ok(LoadLibrary {
        hours,
        load_kw,
        solar_kw: solar.into_iter().map(|s| s[..hours].to_vec()).collect(),
        power_factor: spec.power_factor,
    })
}

/// Loss-to-demand ratio at loading `beta` over the sampled hours; `None` if a
/// power flow fails to converge.
pub fn loss_ratio(net: &Network, lib: &LoadLibrary, config: &Configuration, beta: f64, hours: &[usize]) -> Result<Option<f64>> {
    let mut losses = 0.0;
    let mut demand = 0.0;
    for &t in hours {
        let frame = &lib.frames(net, beta, t, t + 1)[0];
        let sol = solve_power_flow(net, config, frame)?;
        if !sol.converged {
            return Ok(None);
        }
        losses += total_losses(&sol)?;
        demand += beta * lib.demand_kw(t);
    }
    Ok(Some(losses / demand))
}

/// Hours used for calibration: `count` evenly spaced hours of `[0, horizon)`.
pub fn calibration_hours(horizon: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, horizon.max(1));
    (0..count).map(|k| k * horizon / count).collect()
}

/// Bisection on log β in [1e-3, 1e3] for the loss ratio `target`.
/// Non-convergent loadings count as above target.
pub fn calibrate_beta(net: &Network, lib: &LoadLibrary, base: &Configuration, target: f64, hours: &[usize]) -> Result<f64> {
    if !(target > 0.0 && target < 0.1) {
        return Err(DnrError::Calibration(format!("loss ratio target {target} outside (0, 0.1)")));
    }
    let above = |beta: f64| -> Result<(bool, f64)> {
        Ok(match loss_ratio(net, lib, base, beta, hours)? {
            Some(r) => (r > target, r),
            None => (true, f64::INFINITY),
        })
    };
    let (mut lo, mut hi) = (1e-3f64.ln(), 1e3f64.ln());
    let (lo_above, _) = above(lo.exp())?;
    let (hi_above, _) = above(hi.exp())?;
    if lo_above || !hi_above {
        return Err(DnrError::Calibration(format!(
            "loss ratio {target} not bracketed by beta in [1e-3, 1e3] on {}",
            net.name
        )));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let (is_above, ratio) = above(mid.exp())?;
        if ratio.is_finite() && (ratio / target - 1.0).abs() < 1e-3 {
            return Ok(mid.exp());
        }
        if is_above {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Copy of `net` with every branch's r and x multiplied by an independent
/// draw from {0.9, 1.1}. Returns the factors as well.
pub fn perturb_network<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> (Network, Vec<f64>) {
    let factors: Vec<f64> = (0..net.branch_count())
        .map(|_| if rng.random_bool(0.5) { 1.1 } else { 0.9 })
        .collect();
    (net.with_scaled_impedances(&factors), factors)
}

/// One-step enumeration on the controller's network model. Candidates are
/// the canonical stay, then exchanges in lexicographic order; a later
/// candidate wins only if it is cheaper by more than a 1e-9 relative margin.
/// Non-convergent candidates are skipped.
pub fn greedy_reconfig_controller(
    model: &Network,
    params: &RewardParams,
    monitored: &[usize],
    state: &DnrState,
    mask: &SwitchPairMask,
) -> Result<DnrAction> {
    let (si, sj) = mask
        .canonical_stay()
        .ok_or_else(|| DnrError::Contract("configuration has no closeable switch".into()))?;
    let stay = DnrAction::new(si, sj);
    let mut priced = Vec::with_capacity(mask.count());
    for action in std::iter::once(stay).chain(mask.exchanges().map(|(i, j)| DnrAction::new(i, j))) {
        match price_action(model, params, monitored, &state.injections, &state.config, mask, action) {
            Ok((_, info)) => priced.push((action, info.cost())),
            Err(DnrError::NonConvergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(pick_cheapest(&priced).unwrap_or(stay))
}

/// First candidate of minimal cost, where a later candidate must be cheaper
/// by more than 1e-9 relative to displace an earlier one.
pub fn pick_cheapest(candidates: &[(DnrAction, f64)]) -> Option<DnrAction> {
    let mut best: Option<(DnrAction, f64)> = None;
    for &(action, cost) in candidates {
        if best.is_none_or(|(_, b)| cost < b - 1e-9 * b.abs()) {
            best = Some((action, cost));
        }
    }
    best.map(|(a, _)| a)
}

/// Exact behavior-policy distribution over the flattened m x m action table.
pub fn behavior_distribution(probs: &ScenarioProbs, mask: &SwitchPairMask, greedy: DnrAction) -> Result<Vec<f64>> {
    let m = mask.m();
    let (si, sj) = mask
        .canonical_stay()
        .ok_or_else(|| DnrError::Contract("configuration has no closeable switch".into()))?;
    let mut dist = vec![0.0; m * m];
    dist[greedy.flat(m)] += probs.p_mod;
    dist[si * m + sj] += probs.p_fix;
    let exchanges: Vec<(usize, usize)> = mask.exchanges().collect();
    if exchanges.is_empty() {
        dist[si * m + sj] += probs.p_rnd;
    } else {
        let share = probs.p_rnd / exchanges.len() as f64;
        for (i, j) in exchanges {
            dist[i * m + j] += share;
        }
    }
    Ok(dist)
}

/// Draws one behavior action: the controller's with `p_mod`, stay with
/// `p_fix`, otherwise a uniformly random exchange.
pub fn draw_behavior_action<R: Rng + ?Sized>(
    probs: &ScenarioProbs,
    mask: &SwitchPairMask,
    greedy: DnrAction,
    rng: &mut R,
) -> Result<(DnrAction, Scenario)> {
    let (si, sj) = mask
        .canonical_stay()
        .ok_or_else(|| DnrError::Contract("configuration has no closeable switch".into()))?;
    let u: f64 = rng.random();
    if u < probs.p_mod {
        return Ok((greedy, Scenario::Model));
    }
    if u < probs.p_mod + probs.p_fix {
        return Ok((DnrAction::new(si, sj), Scenario::Fixed));
    }
    let exchanges: Vec<(usize, usize)> = mask.exchanges().collect();
    Ok(match exchanges.choose(rng) {
        Some(&(i, j)) => (DnrAction::new(i, j), Scenario::Random),
        None => (DnrAction::new(si, sj), Scenario::Random),
    })
}

/// Rolls the behavior policy for `hours` steps from `start`, recording
/// transitions priced on the true network.
pub fn generate_batch<R: Rng + ?Sized>(
    env: &DnrEnv,
    model: &Network,
    probs: &ScenarioProbs,
    norms: &Normalization,
    start: DnrState,
    hours: usize,
    rng: &mut R,
) -> Result<(Vec<Transition>, DnrState)> {
    probs.validate()?;
    let mut state = start;
    let mut mask = switch_pair_mask(&env.net, &state.config)?;
    let mut out = Vec::with_capacity(hours);
    for _ in 0..hours {
        let greedy = greedy_reconfig_controller(model, &env.params, &env.monitored, &state, &mask)?;
        let (mut action, scenario) = draw_behavior_action(probs, &mask, greedy, rng)?;
        let outcome = match env.step_masked(&state, &mask, action) {
            Err(DnrError::NonConvergence { .. }) => {
                let (taken, out) = first_convergent(env, &state, &mask, action, greedy)?;
                log::warn!(
                    "hour {}: candidate ({}, {}) did not converge, took ({}, {})",
                    state.t, action.close_i, action.open_j, taken.close_i, taken.open_j
                );
                action = taken;
                out
            }
            other => other?,
        };
        let mask_next = switch_pair_mask(&env.net, &outcome.next.config)?;
        out.push(Transition {
            t: state.t,
            s: encode_state(&state, norms),
            action,
            reward: outcome.reward / env.params.reward_scale,
            info: outcome.info,
            s_next: encode_state(&outcome.next, norms),
            config: state.config.clone(),
            config_next: outcome.next.config.clone(),
            mask: mask.clone(),
            mask_next: mask_next.clone(),
            scenario,
            greedy: Some(greedy),
        });
        state = outcome.next;
        mask = mask_next;
    }
    Ok((out, state))
}

/// Fallback when the drawn action does not converge on the true feeder: the
/// controller's choice, then the canonical stay, then exchanges in order.
fn first_convergent(
    env: &DnrEnv,
    state: &DnrState,
    mask: &SwitchPairMask,
    failed: DnrAction,
    greedy: DnrAction,
) -> Result<(DnrAction, StepOutcome)> {
    let (si, sj) = mask.canonical_stay().unwrap();
    let candidates = [greedy, DnrAction::new(si, sj)]
        .into_iter()
        .chain(mask.exchanges().map(|(i, j)| DnrAction::new(i, j)))
        .filter(|&a| a != failed);
    for a in candidates {
        match env.step_masked(state, mask, a) {
            Ok(out) => return Ok((a, out)),
            Err(DnrError::NonConvergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(DnrError::NonConvergence { iterations: 0, last_change: f64::NAN })
}

/// Settings for one historical dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub probs: ScenarioProbs,
    pub train_weeks: usize,
    pub test_weeks: usize,
    pub target_loss_ratio: f64,
    pub calibration_hours: usize,
    pub loads: SyntheticLoadSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            probs: ScenarioProbs { p_mod: 0.5, p_fix: 0.4, p_rnd: 0.1 },
            train_weeks: 52,
            test_weeks: 1,
            target_loss_ratio: 0.015,
            calibration_hours: 336,
            loads: SyntheticLoadSpec::default(),
        }
    }
}

/// Everything produced for one (feeder, probabilities, seed) cell.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Frames for every generated hour plus the one following the test period.
    pub series: Vec<InjectionFrame>,
    pub beta: f64,
    pub perturbation: Vec<f64>,
    pub realized_loss_ratio: f64,
}

impl GeneratedData {
    /// Hour index where the test period starts.
    pub fn test_start(&self) -> usize {
        self.test.transitions.first().map_or(0, |t| t.t)
    }

    /// Configuration at the end of the training batch.
    pub fn final_train_config(&self) -> &Configuration {
        &self.train.transitions.last().expect("non-empty training batch").config_next
    }
}

/// RNG stream ids derived from the dataset seed.
pub const STREAM_LOADS: u64 = 0;
pub const STREAM_PERTURBATION: u64 = 1;
pub const STREAM_BEHAVIOR: u64 = 2;

/// Synthetic loads, calibration, perturbation and the behavior rollout over
/// the training weeks followed by the test weeks, continuing from the
/// all-ties-open configuration.
pub fn generate_dataset(net: &Network, spec: &DatasetSpec, seed: u64) -> Result<GeneratedData> {
    let lib = synthetic_library(net, &spec.loads, &mut seeded_rng(seed, STREAM_LOADS))?;
    generate_dataset_from(net, spec, &lib, seed)
}

pub fn generate_dataset_from(net: &Network, spec: &DatasetSpec, lib: &LoadLibrary, seed: u64) -> Result<GeneratedData> {
    spec.probs.validate()?;
    let train_hours = spec.train_weeks * HOURS_PER_WEEK;
    let total = (spec.train_weeks + spec.test_weeks) * HOURS_PER_WEEK;
    if train_hours == 0 || lib.hours < total + 1 {
        return Err(DnrError::Config(format!(
            "library of {} hours cannot cover {total} generated hours",
            lib.hours
        )));
    }
    let base = net.base_configuration();
    let beta = calibrate_beta(net, lib, &base, spec.target_loss_ratio, &calibration_hours(train_hours, spec.calibration_hours))?;
    let realized = loss_ratio(net, lib, &base, beta, &calibration_hours(train_hours, spec.calibration_hours))?.unwrap_or(f64::NAN);
    let series = lib.frames(net, beta, 0, total + 1);
    let norms = Normalization::fit(&series[..train_hours], net.load_buses())?;
    let (model, perturbation) = perturb_network(net, &mut seeded_rng(seed, STREAM_PERTURBATION));
    let params = RewardParams::for_network(net)?;
    let env = DnrEnv::new(net.clone(), Arc::new(series.clone()), params)?;
    let mut rng = seeded_rng(seed, STREAM_BEHAVIOR);
    let start = env.reset(&base, 0)?;
    let (train_tr, state) = generate_batch(&env, &model, &spec.probs, &norms, start, train_hours, &mut rng)?;
    let (test_tr, _) = generate_batch(&env, &model, &spec.probs, &norms, state, total - train_hours, &mut rng)?;
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        feeder: net.name.clone(),
        m: net.branch_count(),
        state_dim: norms.feature_dim(net.branch_count()),
        reward_scale: params.reward_scale,
        params,
        norms,
        probs: Some(spec.probs.as_array()),
        beta: Some(beta),
        seed: Some(seed),
    };
    Ok(GeneratedData {
        train: Dataset { header: header.clone(), transitions: train_tr },
        test: Dataset { header, transitions: test_tr },
        series,
        beta,
        perturbation,
        realized_loss_ratio: realized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::solve_power_flow;

    #[test]
    fn ratio_four_split() {
        let p = ScenarioProbs::from_ratio(0.5, 4.0).unwrap();
        assert!((p.p_fix - 0.4).abs() < 1e-15 && (p.p_rnd - 0.1).abs() < 1e-15);
        assert!(ScenarioProbs::new(0.5, 0.6, 0.1).is_err());
        assert!(ScenarioProbs::new(-0.1, 1.0, 0.1).is_err());
    }

    #[test]
    fn reactive_power_at_098() {
        assert!((98.0 * reactive_ratio(0.98) - 19.90).abs() < 5e-3);
    }

    #[test]
    fn synthetic_library_is_deterministic() {
        let net = Network::builtin("16bus").unwrap();
        let spec = SyntheticLoadSpec { weeks: 2, ..Default::default() };
        let a = synthetic_library(&net, &spec, &mut seeded_rng(3, 0)).unwrap();
        let b = synthetic_library(&net, &spec, &mut seeded_rng(3, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hours, 336);
        for &s in net.substations() {
            assert!(a.load_kw[s].iter().all(|v| *v == 0.0));
        }
        let solar = net.bus_index(11).unwrap();
        assert!(a.solar_kw[solar].iter().any(|v| *v > 0.0));
        assert!(a.solar_kw[net.bus_index(10).unwrap()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn csv_ingestion_aggregates_and_reports_gaps() {
        let mut net = Network::builtin("16bus").unwrap();
        net.case.as_mut().unwrap().customers_per_bus = 2;
        let needed = 2 * net.load_buses().len();
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("customer,hour,kwh\n");
        for c in 0..needed {
            for h in 0..4 {
                body.push_str(&format!("c{c:03},{h},1.0\n"));
            }
        }
        std::fs::write(dir.path().join("meters.csv"), &body).unwrap();
        let spec = SyntheticLoadSpec::default();
        let lib = ingest_library(dir.path(), &net, &spec, &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(lib.hours, 4);
        for &b in net.load_buses() {
            assert_eq!(lib.load_kw[b], vec![2.0; 4]);
        }
        std::fs::write(dir.path().join("meters.csv"), body.replace("c000,2,1.0\n", "")).unwrap();
        let err = ingest_library(dir.path(), &net, &spec, &mut seeded_rng(0, 0)).unwrap_err();
        assert!(matches!(err, DnrError::Ingestion(ref m) if m.contains("c000")));
        net.case.as_mut().unwrap().customers_per_bus = 3;
        std::fs::write(dir.path().join("meters.csv"), &body).unwrap();
        assert!(matches!(ingest_library(dir.path(), &net, &spec, &mut seeded_rng(0, 0)), Err(DnrError::Config(_))));
    }

    #[test]
    fn calibration_hits_target_and_reacts_to_impedance() {
        let net = Network::builtin("33bus").unwrap();
        let spec = SyntheticLoadSpec { weeks: 2, ..Default::default() };
        let lib = synthetic_library(&net, &spec, &mut seeded_rng(1, 0)).unwrap();
        let base = net.base_configuration();
        let hours = calibration_hours(336, 48);
        let beta = calibrate_beta(&net, &lib, &base, 0.015, &hours).unwrap();
        let ratio = loss_ratio(&net, &lib, &base, beta, &hours).unwrap().unwrap();
        assert!((0.01425..=0.01575).contains(&ratio), "ratio {ratio}");
        let heavy = net.with_scaled_impedances(&vec![2.0; net.branch_count()]);
        let beta2 = calibrate_beta(&heavy, &lib, &base, 0.015, &hours).unwrap();
        assert!(beta2 < beta);
        assert!(matches!(calibrate_beta(&net, &lib, &base, 0.0, &hours), Err(DnrError::Calibration(_))));
    }

    fn loaded_state(net: &Network, load: f64) -> DnrState {
        let mut f = InjectionFrame::zeros(0, net.bus_count());
        for &b in net.load_buses() {
            f.p[b] = -load;
            f.q[b] = -load * 0.2;
        }
        DnrState { injections: f, config: net.base_configuration(), t: 0 }
    }

    #[test]
    fn greedy_matches_exhaustive_oracle() {
        let net = Network::builtin("16bus").unwrap();
        let params = RewardParams::for_network(&net).unwrap();
        let monitored: Vec<usize> = (0..net.bus_count()).collect();
        for load in [0.0, 0.01, 0.05] {
            let state = loaded_state(&net, load);
            let mask = switch_pair_mask(&net, &state.config).unwrap();
            let chosen = greedy_reconfig_controller(&net, &params, &monitored, &state, &mask).unwrap();
            // Oracle: direct power flow on every candidate configuration.
            let cost = |i: usize, j: usize| {
                let mut cfg = state.config.clone();
                cfg.set(i, true);
                cfg.set(j, false);
                let sol = solve_power_flow(&net, &cfg, &state.injections).unwrap();
                let vio: f64 = sol.voltage_magnitudes().iter().map(|v| (v - 1.1).max(0.0) + (0.9 - v).max(0.0)).sum();
                0.13 * sol.losses_pu * 100_000.0 + if i == j { 0.0 } else { 8.0 } + 0.13 * vio
            };
            let best = mask.pairs().map(|(i, j)| cost(i, j)).fold(f64::INFINITY, f64::min);
            assert!(cost(chosen.close_i, chosen.open_j) <= best * (1.0 + 1e-9) + 1e-12);
            if load == 0.0 {
                assert!(chosen.is_stay());
            }
        }
        let state = loaded_state(&net, 0.05);
        let mask = switch_pair_mask(&net, &state.config).unwrap();
        assert!(!greedy_reconfig_controller(&net, &params, &monitored, &state, &mask).unwrap().is_stay());
    }

    #[test]
    fn tie_rule_prefers_stay_then_lexicographic() {
        let stay = DnrAction::new(3, 3);
        let a = DnrAction::new(3, 1);
        let b = DnrAction::new(3, 2);
        assert_eq!(pick_cheapest(&[(stay, 5.0), (a, 5.0), (b, 5.0)]), Some(stay));
        assert_eq!(pick_cheapest(&[(stay, 9.0), (a, 5.0), (b, 5.0)]), Some(a));
        assert_eq!(pick_cheapest(&[(stay, 9.0), (a, 5.0), (b, 5.0 * (1.0 - 1e-12))]), Some(a));
        assert_eq!(pick_cheapest(&[(stay, 9.0), (a, 5.0), (b, 4.0)]), Some(b));
        assert_eq!(pick_cheapest(&[]), None);
    }

    #[test]
    fn fixed_only_scenarios_keep_configuration() {
        let net = Network::builtin("16bus").unwrap();
        let spec = DatasetSpec {
            probs: ScenarioProbs::new(0.0, 1.0, 0.0).unwrap(),
            train_weeks: 1,
            test_weeks: 1,
            calibration_hours: 24,
            loads: SyntheticLoadSpec { weeks: 3, ..Default::default() },
            ..Default::default()
        };
        let data = generate_dataset(&net, &spec, 4).unwrap();
        let base = net.base_configuration();
        assert!(data.train.transitions.iter().all(|t| t.action.is_stay() && t.config_next == base));
        assert_eq!(data.train.len(), 168);
        assert_eq!(data.test.len(), 168);
        assert_eq!(data.test_start(), 168);
    }
}

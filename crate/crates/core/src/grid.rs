//! Static feeder description and radial power flow.
//!
//! A [`Network`] is parsed from a JSON feeder document and is immutable
//! afterwards. Power flow is a backward/forward sweep over each
//! substation-rooted tree of the active configuration.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DnrError, Result};
use crate::topology::{Configuration, Forest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Substation,
    Load,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
}

/// A line segment between two buses. `from`/`to` are bus indices, not ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
    pub switchable: bool,
    pub normally_open: bool,
}

/// Experiment constants attached to a feeder file (solar placement,
/// switching cost, customers aggregated per load bus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseData {
    #[serde(default)]
    pub solar_buses: Vec<u32>,
    pub switch_cost: f64,
    pub customers_per_bus: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub name: String,
    pub s_base_mva: f64,
    pub v_base_kv: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub case: Option<CaseData>,
    bus_index: HashMap<u32, usize>,
    substations: Vec<usize>,
    load_buses: Vec<usize>,
    incidence: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeederDoc {
    #[serde(default)]
    name: Option<String>,
    s_base_mva: f64,
    #[serde(default)]
    v_base_kv: Option<f64>,
    #[serde(default)]
    case: Option<CaseData>,
    buses: Vec<BusDoc>,
    branches: Vec<BranchDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BusDoc {
    id: u32,
    kind: BusKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct BranchDoc {
    id: usize,
    from: u32,
    to: u32,
    r_pu: f64,
    x_pu: f64,
    #[serde(default = "default_true")]
    switchable: bool,
    #[serde(default)]
    normally_open: bool,
}

fn default_true() -> bool {
    true
}

const BUILTIN_FEEDERS: &[(&str, &str)] = &[
    ("16bus", include_str!("../data/feeders/16bus.json")),
    ("33bus", include_str!("../data/feeders/33bus.json")),
    ("70bus", include_str!("../data/feeders/70bus.json")),
    ("119bus", include_str!("../data/feeders/119bus.json")),
];

/// Parse a feeder document and validate every network invariant.
pub fn parse_feeder(text: &str) -> Result<Network> {
    let doc: FeederDoc = serde_json::from_str(text).map_err(|e| DnrError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Network::from_doc(doc)
}

impl Network {
    fn from_doc(doc: FeederDoc) -> Result<Network> {
        if !(doc.s_base_mva.is_finite() && doc.s_base_mva > 0.0) {
            return Err(DnrError::Validation(format!(
                "s_base_mva must be positive, got {}",
                doc.s_base_mva
            )));
        }
        let mut bus_index = HashMap::new();
        let mut buses = Vec::with_capacity(doc.buses.len());
        for (k, b) in doc.buses.iter().enumerate() {
            if bus_index.insert(b.id, k).is_some() {
                return Err(DnrError::Validation(format!("duplicate bus id {}", b.id)));
            }
            buses.push(Bus { id: b.id, kind: b.kind });
        }
        let substations: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Substation)
            .map(|(k, _)| k)
            .collect();
        if substations.is_empty() {
            return Err(DnrError::Validation("feeder has no substation bus".into()));
        }
        let load_buses = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Load)
            .map(|(k, _)| k)
            .collect();

        let mut branches = Vec::with_capacity(doc.branches.len());
        for (k, br) in doc.branches.iter().enumerate() {
            if br.id != k {
                return Err(DnrError::Validation(format!(
                    "branch ids must be 0..m-1 in order; position {k} has id {}",
                    br.id
                )));
            }
            let from = *bus_index.get(&br.from).ok_or_else(|| {
                DnrError::Validation(format!("branch {} references unknown bus {}", br.id, br.from))
            })?;
            let to = *bus_index.get(&br.to).ok_or_else(|| {
                DnrError::Validation(format!("branch {} references unknown bus {}", br.id, br.to))
            })?;
            if from == to {
                return Err(DnrError::Validation(format!("branch {} is a self-loop", br.id)));
            }
            for (field, v) in [("r_pu", br.r_pu), ("x_pu", br.x_pu)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(DnrError::Validation(format!(
                        "branch {} has invalid {field} = {v}",
                        br.id
                    )));
                }
            }
            branches.push(Branch {
                id: br.id,
                from,
                to,
                r_pu: br.r_pu,
                x_pu: br.x_pu,
                switchable: br.switchable,
                normally_open: br.normally_open,
            });
        }
        if let Some(case) = &doc.case {
            for id in &case.solar_buses {
                if !bus_index.contains_key(id) {
                    return Err(DnrError::Validation(format!("solar bus {id} is not in the feeder")));
                }
            }
        }
        let mut incidence = vec![Vec::new(); buses.len()];
        for br in &branches {
            incidence[br.from].push((br.id, br.to));
            incidence[br.to].push((br.id, br.from));
        }
        Ok(Network {
            name: doc.name.unwrap_or_else(|| "feeder".to_string()),
            s_base_mva: doc.s_base_mva,
            v_base_kv: doc.v_base_kv.unwrap_or(12.66),
            buses,
            branches,
            case: doc.case,
            bus_index,
            substations,
            load_buses,
            incidence,
        })
    }

    /// Load a feeder from a file path, falling back to the shipped feeders
    /// (`16bus`, `33bus`, `70bus`, `119bus`) when no such file exists.
    pub fn load(spec: &str) -> Result<Network> {
        let path = Path::new(spec);
        if path.is_file() {
            return parse_feeder(&std::fs::read_to_string(path)?);
        }
        Self::builtin(spec)
    }

    pub fn builtin(name: &str) -> Result<Network> {
        let key = name.trim_end_matches(".json");
        BUILTIN_FEEDERS
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, text)| parse_feeder(text))
            .unwrap_or_else(|| {
                Err(DnrError::Config(format!(
                    "no feeder file or built-in feeder named '{name}'"
                )))
            })
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_FEEDERS.iter().map(|(n, _)| *n)
    }

    /// Serialize back to the feeder schema.
    pub fn to_json(&self) -> String {
        let doc = FeederDoc {
            name: Some(self.name.clone()),
            s_base_mva: self.s_base_mva,
            v_base_kv: Some(self.v_base_kv),
            case: self.case.clone(),
            buses: self
                .buses
                .iter()
                .map(|b| BusDoc { id: b.id, kind: b.kind })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|br| BranchDoc {
                    id: br.id,
                    from: self.buses[br.from].id,
                    to: self.buses[br.to].id,
                    r_pu: br.r_pu,
                    x_pu: br.x_pu,
                    switchable: br.switchable,
                    normally_open: br.normally_open,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("feeder document serializes")
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn substation_count(&self) -> usize {
        self.substations.len()
    }

    pub fn substations(&self) -> &[usize] {
        &self.substations
    }

    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }

    /// `(branch, neighbour)` pairs incident to a bus, over all branches.
    pub fn incident(&self, bus: usize) -> &[(usize, usize)] {
        &self.incidence[bus]
    }

    pub fn is_substation(&self, bus: usize) -> bool {
        self.buses[bus].kind == BusKind::Substation
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn switch_cost(&self) -> Option<f64> {
        self.case.as_ref().map(|c| c.switch_cost)
    }

    /// The configuration with every normally-open (tie) branch open.
    pub fn base_configuration(&self) -> Configuration {
        Configuration::new(self.branches.iter().map(|b| !b.normally_open).collect())
    }

    /// Copy of the network with every branch impedance multiplied by `factor[k]`.
    pub fn with_scaled_impedances(&self, factors: &[f64]) -> Network {
        assert_eq!(factors.len(), self.branches.len());
        let mut net = self.clone();
        for (br, f) in net.branches.iter_mut().zip(factors) {
            br.r_pu *= f;
            br.x_pu *= f;
        }
        net
    }
}

/// Nodal injections at one hour, per bus index, in p.u. Positive values
/// inject power into the network; loads are negative. Substation entries are
/// ignored on input and filled by power flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionFrame {
    pub t: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionFrame {
    pub fn zeros(t: usize, buses: usize) -> Self {
        InjectionFrame {
            t,
            p: vec![0.0; buses],
            q: vec![0.0; buses],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Complex bus voltages (p.u.).
    pub voltage: Vec<Complex64>,
    /// Complex branch currents in the parent-to-child direction (0 if open).
    pub branch_current: Vec<Complex64>,
    /// Real power entering each branch at its sending end (0 if open).
    pub branch_flow_p: Vec<f64>,
    /// Net real injection at every bus, substation imports included.
    pub injection_p: Vec<f64>,
    /// Total real losses, sum of branch I^2 R (p.u.).
    pub losses_pu: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Largest |S_computed - S_scheduled| over load buses at the final iterate.
    pub max_mismatch: f64,
    pub s_base_mva: f64,
}

impl PowerFlowSolution {
    pub fn voltage_magnitudes(&self) -> Vec<f64> {
        self.voltage.iter().map(|v| v.norm()).collect()
    }

    /// Sum of all net real injections including substation imports.
    pub fn injection_balance(&self) -> f64 {
        self.injection_p.iter().sum()
    }
}

/// Backward/forward sweep on each substation-rooted tree.
pub fn solve_power_flow(
    net: &Network,
    config: &Configuration,
    inj: &InjectionFrame,
) -> Result<PowerFlowSolution> {
    solve_power_flow_with(net, config, inj, PowerFlowOptions::default())
}

pub fn solve_power_flow_with(
    net: &Network,
    config: &Configuration,
    inj: &InjectionFrame,
    opts: PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    let n = net.bus_count();
    if inj.p.len() != n || inj.q.len() != n {
        return Err(DnrError::Contract(format!(
            "injection frame has {}/{} entries, network has {n} buses",
            inj.p.len(),
            inj.q.len()
        )));
    }
    let forest = Forest::build(net, config).ok_or_else(|| {
        DnrError::Contract("power flow requires a radial configuration".into())
    })?;
    Ok(sweep(net, &forest, inj, opts))
}

fn sweep(net: &Network, forest: &Forest, inj: &InjectionFrame, opts: PowerFlowOptions) -> PowerFlowSolution {
    let n = net.bus_count();
    let m = net.branch_count();
    let sched: Vec<Complex64> = (0..n)
        .map(|k| {
            if net.is_substation(k) {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(inj.p[k], inj.q[k])
            }
        })
        .collect();
    let z: Vec<Complex64> = net
        .branches
        .iter()
        .map(|b| Complex64::new(b.r_pu, b.x_pu))
        .collect();

    let one = Complex64::new(1.0, 0.0);
    let mut v = vec![one; n];
    let mut subtree = vec![Complex64::new(0.0, 0.0); n];
    let mut injected = vec![Complex64::new(0.0, 0.0); n];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        // Backward: current drawn by each subtree, leaves first.
        for &bus in forest.order.iter().rev() {
            injected[bus] = if net.is_substation(bus) {
                Complex64::new(0.0, 0.0)
            } else {
                (sched[bus] / v[bus]).conj()
            };
            subtree[bus] = -injected[bus];
        }
        for &bus in forest.order.iter().rev() {
            if let Some(parent) = forest.parent[bus] {
                let flow = subtree[bus];
                subtree[parent] += flow;
            }
        }
        // Forward: voltage drops from each root outward.
        let mut change: f64 = 0.0;
        for &bus in forest.order.iter() {
            if let (Some(parent), Some(br)) = (forest.parent[bus], forest.parent_branch[bus]) {
                let updated = v[parent] - z[br] * subtree[bus];
                change = change.max((updated - v[bus]).norm());
                v[bus] = updated;
            }
        }
        if !change.is_finite() {
            break;
        }
        if change < opts.tolerance {
            converged = true;
            break;
        }
    }

    let mut branch_current = vec![Complex64::new(0.0, 0.0); m];
    let mut branch_flow_p = vec![0.0; m];
    let mut losses = 0.0;
    for &bus in forest.order.iter() {
        if let (Some(parent), Some(br)) = (forest.parent[bus], forest.parent_branch[bus]) {
            let i = subtree[bus];
            branch_current[br] = i;
            branch_flow_p[br] = (v[parent] * i.conj()).re;
            losses += i.norm_sqr() * net.branches[br].r_pu;
        }
    }
    let mut injection_p = vec![0.0; n];
    let mut max_mismatch: f64 = 0.0;
    for bus in 0..n {
        if net.is_substation(bus) {
            injection_p[bus] = (v[bus] * subtree[bus].conj()).re;
        } else {
            injection_p[bus] = sched[bus].re;
            let computed = v[bus] * injected[bus].conj();
            max_mismatch = max_mismatch.max((computed - sched[bus]).norm());
        }
    }
    if !losses.is_finite() {
        converged = false;
    }

    PowerFlowSolution {
        voltage: v,
        branch_current,
        branch_flow_p,
        injection_p,
        losses_pu: losses,
        converged,
        iterations,
        max_mismatch,
        s_base_mva: net.s_base_mva,
    }
}

/// Total real losses in kW.
pub fn total_losses(sol: &PowerFlowSolution) -> Result<f64> {
    if !sol.converged {
        return Err(DnrError::Contract(
            "losses requested from an unconverged power flow".into(),
        ));
    }
    Ok(sol.losses_pu * sol.s_base_mva * 1000.0)
}

/// Sum of voltage-band violations over the monitored buses (p.u.).
pub fn voltage_violation(
    sol: &PowerFlowSolution,
    v_lo: f64,
    v_hi: f64,
    monitored: &[usize],
) -> Result<f64> {
    if !(v_lo < v_hi) {
        return Err(DnrError::Contract(format!("voltage band [{v_lo}, {v_hi}] is empty")));
    }
    let mut seen = HashSet::new();
    let mut total = 0.0;
    for &bus in monitored {
        let v = sol
            .voltage
            .get(bus)
            .ok_or_else(|| DnrError::Validation(format!("monitored bus index {bus} not in network")))?
            .norm();
        if seen.insert(bus) {
            total += (v - v_hi).max(0.0) + (v_lo - v).max(0.0);
        }
    }
    Ok(total)
}

//! Experiment orchestration: dataset directories, the
//! generate → CVAE → train → evaluate pipeline over a grid of behavior
//! probabilities and seeds, cost tables and reproducibility manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{
    evaluate_weekly_cost, train_bcsac, train_dqn, train_sac, ActorPolicy, BcsacModel, BehaviorTable, DqnModel, DqnPolicy,
    EvalResult, HyperTable, Policy, PreparedData, StayPolicy,
};
use crate::behavior_data::{generate_dataset, DatasetSpec, GeneratedData, ScenarioProbs};
use crate::cvae::{train_cvae, CvaeHyper, CvaeModel, CvaeSample};
use crate::env::{load_series, save_series, Dataset, DnrEnv, HOURS_PER_WEEK};
use crate::grid::{InjectionFrame, Network};
use crate::nn::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::topology::Configuration;
use crate::{seeded_rng, DnrError, Result};

pub const STREAM_CVAE: u64 = 3;
pub const STREAM_BEHAVIOR_TABLE: u64 = 4;
pub const STREAM_BCSAC: u64 = 5;
pub const STREAM_SAC: u64 = 6;
pub const STREAM_DQN: u64 = 7;

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const SERIES_FILE: &str = "series.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bcsac,
    Sac,
    Dqn,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bcsac => "bcsac",
            Algorithm::Sac => "sac",
            Algorithm::Dqn => "dqn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bcsac" => Ok(Algorithm::Bcsac),
            "sac" => Ok(Algorithm::Sac),
            "dqn" => Ok(Algorithm::Dqn),
            other => Err(DnrError::Config(format!("unknown algorithm {other:?}"))),
        }
    }

    fn stream(self) -> u64 {
        match self {
            Algorithm::Bcsac => STREAM_BCSAC,
            Algorithm::Sac => STREAM_SAC,
            Algorithm::Dqn => STREAM_DQN,
        }
    }
}

/// CVAE settings used inside the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeRunSettings {
    /// Overrides the hyperparameter file width when set.
    pub hidden: Option<usize>,
    pub batch: usize,
    pub steps: usize,
    /// Prior draws per state for the behavior marginal.
    pub samples: usize,
}

impl Default for CvaeRunSettings {
    fn default() -> Self {
        CvaeRunSettings { hidden: None, batch: 64, steps: 6000, samples: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Built-in feeder name or feeder file path.
    pub feeder: String,
    pub p_mod: Vec<f64>,
    /// P_fix / P_rnd.
    pub fix_rnd_ratio: f64,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    /// Hyperparameter file; the feeder preset when absent.
    pub hyper_file: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub train_weeks: usize,
    pub test_weeks: usize,
    pub target_loss_ratio: f64,
    /// Overrides the hyperparameter file when set.
    pub training_steps: Option<usize>,
    pub cvae: CvaeRunSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        ExperimentConfig {
            feeder: "16bus".into(),
            p_mod: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            fix_rnd_ratio: 4.0,
            seeds: vec![1, 2, 3, 4, 5],
            algorithms: vec![Algorithm::Bcsac, Algorithm::Sac, Algorithm::Dqn],
            hyper_file: None,
            output_dir: PathBuf::from("results"),
            train_weeks: spec.train_weeks,
            test_weeks: spec.test_weeks,
            target_loss_ratio: spec.target_loss_ratio,
            training_steps: None,
            cvae: CvaeRunSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file, or the config embedded in a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let body = value.get("config").cloned().unwrap_or(value);
        let cfg: ExperimentConfig = serde_json::from_value(body)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for &p in &self.p_mod {
            ScenarioProbs::from_ratio(p, self.fix_rnd_ratio)?;
        }
        if self.seeds.is_empty() || self.p_mod.is_empty() {
            return Err(DnrError::Config("at least one seed and one P_mod value required".into()));
        }
        if let Some(f) = &self.hyper_file {
            if !f.is_file() {
                return Err(DnrError::Config(format!("hyperparameter file {} not found", f.display())));
            }
        }
        Network::load(&self.feeder)?;
        Ok(())
    }

    pub fn hyper(&self) -> Result<HyperTable> {
        let mut hp = match &self.hyper_file {
            Some(f) => HyperTable::load(f)?,
            None => HyperTable::preset(&Network::load(&self.feeder)?.name)?,
        };
        if let Some(steps) = self.training_steps {
            hp.shared.training_steps = steps;
        }
        if let Some(h) = self.cvae.hidden {
            hp.cvae.hidden_units = h;
        }
        hp.validate()?;
        Ok(hp)
    }

    pub fn dataset_spec(&self, p_mod: f64) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            probs: ScenarioProbs::from_ratio(p_mod, self.fix_rnd_ratio)?,
            train_weeks: self.train_weeks,
            test_weeks: self.test_weeks,
            target_loss_ratio: self.target_loss_ratio,
            ..Default::default()
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Provenance of one generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub feeder: String,
    pub seed: u64,
    pub probs: [f64; 3],
    pub beta: f64,
    pub realized_loss_ratio: f64,
    /// Branch impedance factors of the controller's network model.
    pub perturbation: Vec<f64>,
    pub train_weeks: usize,
    pub test_weeks: usize,
    pub test_start: usize,
    /// SHA-256 of every file in the directory.
    pub files: BTreeMap<String, String>,
}

/// Writes train/test batches, the injection series and a manifest to `dir`.
pub fn write_data_dir(dir: &Path, g: &GeneratedData, spec: &DatasetSpec, seed: u64) -> Result<DataManifest> {
    std::fs::create_dir_all(dir)?;
    g.train.save(&dir.join(TRAIN_FILE))?;
    g.test.save(&dir.join(TEST_FILE))?;
    save_series(&dir.join(SERIES_FILE), &g.series)?;
    let mut files = BTreeMap::new();
    for f in [TRAIN_FILE, TEST_FILE, SERIES_FILE] {
        files.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    let manifest = DataManifest {
        feeder: g.train.header.feeder.clone(),
        seed,
        probs: spec.probs.as_array(),
        beta: g.beta,
        realized_loss_ratio: g.realized_loss_ratio,
        perturbation: g.perturbation.clone(),
        train_weeks: spec.train_weeks,
        test_weeks: spec.test_weeks,
        test_start: g.test_start(),
        files,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A dataset directory read back for training or evaluation.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub train: Dataset,
    pub test: Dataset,
    pub series: Vec<InjectionFrame>,
    pub manifest: Option<DataManifest>,
}

impl DataDir {
    pub fn load(dir: &Path, net: &Network) -> Result<Self> {
        let manifest = match std::fs::read_to_string(dir.join(MANIFEST_FILE)) {
            Ok(text) => Some(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let out = DataDir {
            train: Dataset::load(&dir.join(TRAIN_FILE), net)?,
            test: Dataset::load(&dir.join(TEST_FILE), net)?,
            series: load_series(&dir.join(SERIES_FILE))?,
            manifest,
        };
        if out.train.is_empty() || out.test.is_empty() {
            return Err(DnrError::Validation("dataset directory has an empty batch".into()));
        }
        Ok(out)
    }

    pub fn from_generated(g: &GeneratedData) -> Self {
        DataDir { train: g.train.clone(), test: g.test.clone(), series: g.series.clone(), manifest: None }
    }

    pub fn env(&self, net: &Network) -> Result<DnrEnv> {
        DnrEnv::new(net.clone(), Arc::new(self.series.clone()), self.train.header.params)
    }

    /// Configuration at the end of the training batch.
    pub fn start_config(&self) -> &Configuration {
        &self.train.transitions.last().expect("non-empty training batch").config_next
    }

    pub fn test_start(&self) -> usize {
        self.test.transitions[0].t
    }

    /// Largest hourly cost in the training batch; charged for evaluation hours
    /// that fail to converge.
    pub fn fallback_cost(&self) -> f64 {
        self.train.transitions.iter().map(|t| t.info.cost()).fold(0.0, f64::max)
    }

    /// Rolls `policy` greedily over the test week.
    pub fn evaluate(&self, net: &Network, policy: &mut dyn Policy) -> Result<EvalResult> {
        let hours = self.test.len().min(HOURS_PER_WEEK);
        evaluate_weekly_cost(&self.env(net)?, &self.train.header.norms, policy, self.start_config(), self.test_start(), hours, self.fallback_cost())
    }

    /// Realized cost of the recorded behavior over the evaluated test hours.
    pub fn historical_cost(&self) -> f64 {
        self.test.transitions.iter().take(HOURS_PER_WEEK).map(|t| t.info.cost()).sum()
    }
}

/// CVAE on the training batch with its own RNG stream.
pub fn fit_behavior_model(train: &Dataset, hp: &CvaeHyper, seed: u64) -> Result<(CvaeModel, Vec<f64>)> {
    let samples: Vec<CvaeSample> = train.transitions.iter().map(CvaeSample::from).collect();
    train_cvae(&samples, hp, &mut seeded_rng(seed, STREAM_CVAE))
}

/// A trained agent: final checkpoint, checkpoint series and per-step
/// training curve.
pub struct TrainedAgent {
    pub checkpoint: Checkpoint,
    pub series: Vec<(usize, Checkpoint)>,
    /// Header line then one line per step.
    pub curve_csv: String,
}

fn curve_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| DnrError::Io(e.into_error()))?).map_err(|e| DnrError::Contract(e.to_string()))
}

/// Trains `algo` on the batch. BCSAC requires the behavior model.
pub fn train_agent(algo: Algorithm, data: &PreparedData, behavior: Option<&CvaeModel>, hp: &HyperTable, cvae_samples: usize, seed: u64) -> Result<TrainedAgent> {
    let mut rng = seeded_rng(seed, algo.stream());
    match algo {
        Algorithm::Bcsac => {
            let cvae = behavior.ok_or_else(|| DnrError::Config("bcsac requires a behavior model".into()))?;
            let table = BehaviorTable::from_cvae(cvae, data, cvae_samples, &mut seeded_rng(seed, STREAM_BEHAVIOR_TABLE))?;
            let run = train_bcsac(data, &table, &hp.bcsac, &hp.shared, &mut rng)?;
            Ok(TrainedAgent { checkpoint: run.model.to_checkpoint(), series: run.checkpoints, curve_csv: curve_csv(&run.stats)? })
        }
        Algorithm::Sac => {
            let run = train_sac(data, &hp.sac, &hp.shared, &mut rng)?;
            Ok(TrainedAgent { checkpoint: run.model.to_checkpoint(), series: run.checkpoints, curve_csv: curve_csv(&run.stats)? })
        }
        Algorithm::Dqn => {
            let run = train_dqn(data, &hp.dqn, &hp.shared, &mut rng)?;
            Ok(TrainedAgent { checkpoint: run.model.to_checkpoint(), series: run.checkpoints, curve_csv: curve_csv(&run.stats)? })
        }
    }
}

/// Greedy policy of an agent checkpoint.
pub fn policy_from_checkpoint(ckpt: &Checkpoint) -> Result<Box<dyn Policy>> {
    match ckpt.metadata["algo"].as_str() {
        Some("bcsac") | Some("sac") => Ok(Box::new(ActorPolicy::greedy(&BcsacModel::from_checkpoint(ckpt)?))),
        Some("dqn") => Ok(Box::new(DqnPolicy(DqnModel::from_checkpoint(ckpt)?))),
        _ => Err(DnrError::Checkpoint("not an agent checkpoint".into())),
    }
}

/// Weekly cost of one (P_mod, seed, method) cell; methods include the
/// "historical" replay and the "stay" baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub p_mod: f64,
    pub seed: u64,
    pub method: String,
    pub weekly_cost: Option<f64>,
    pub non_converged: usize,
    pub status: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRecord {
    pub p_mod: f64,
    pub seed: u64,
    pub method: String,
    pub train_seconds: f64,
    pub decision_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub hyper: HyperTable,
    pub datasets: Vec<DataManifest>,
    /// SHA-256 of each checkpoint and curve, keyed by relative path.
    pub artifacts: BTreeMap<String, String>,
    pub failures: Vec<String>,
}

pub struct ExperimentOutput {
    pub results: Vec<CellResult>,
    pub timing: Vec<TimingRecord>,
    pub manifest: RunManifest,
    pub table: CostTable,
}

pub const RESULTS_FILE: &str = "results.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const TABLE_FILE: &str = "costs.csv";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every (P_mod, seed) cell. A failing stage is recorded and the run
/// continues; results written so far are kept.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let net = Network::load(&cfg.feeder)?;
    let hp = cfg.hyper()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let mut results = Vec::new();
    let mut timing = Vec::new();
    let mut datasets = Vec::new();
    let mut artifacts = BTreeMap::new();
    let mut failures = Vec::new();

    for &p_mod in &cfg.p_mod {
        for &seed in &cfg.seeds {
            let cell = format!("pmod{p_mod}_seed{seed}");
            let cell_dir = out.join(&cell);
            let fail = |method: &str, e: &DnrError| CellResult {
                p_mod,
                seed,
                method: method.into(),
                weekly_cost: None,
                non_converged: 0,
                status: format!("failed: {e}"),
                checkpoint: String::new(),
            };
            let spec = cfg.dataset_spec(p_mod)?;
            let generated = generate_dataset(&net, &spec, seed).and_then(|g| {
                let m = write_data_dir(&cell_dir.join("data"), &g, &spec, seed)?;
                Ok((g, m))
            });
            let (g, manifest) = match generated {
                Ok(v) => v,
                Err(e) => {
                    failures.push(format!("{cell} gen-data: {e}"));
                    results.push(fail("historical", &e));
                    continue;
                }
            };
            datasets.push(manifest);
            let data_dir = DataDir::from_generated(&g);
            results.push(CellResult {
                p_mod,
                seed,
                method: "historical".into(),
                weekly_cost: Some(data_dir.historical_cost()),
                non_converged: 0,
                status: "ok".into(),
                checkpoint: String::new(),
            });
            match data_dir.evaluate(&net, &mut StayPolicy) {
                Ok(ev) => results.push(CellResult {
                    p_mod,
                    seed,
                    method: "stay".into(),
                    weekly_cost: Some(ev.total_cost),
                    non_converged: ev.non_converged,
                    status: "ok".into(),
                    checkpoint: String::new(),
                }),
                Err(e) => results.push(fail("stay", &e)),
            }
            let prepared = match PreparedData::from_dataset(&g.train) {
                Ok(p) => p,
                Err(e) => {
                    failures.push(format!("{cell} prepare: {e}"));
                    continue;
                }
            };
            let cvae = if cfg.algorithms.contains(&Algorithm::Bcsac) {
                let chp = hp.cvae_hyper(cfg.cvae.batch, cfg.cvae.steps, cfg.cvae.samples);
                match fit_behavior_model(&g.train, &chp, seed) {
                    Ok((model, _)) => {
                        let rel = format!("{cell}/cvae.ckpt");
                        write_checkpoint(&out.join(&rel), &model.to_checkpoint(&chp))?;
                        artifacts.insert(rel.clone(), sha256_file(&out.join(&rel))?);
                        Some(model)
                    }
                    Err(e) => {
                        failures.push(format!("{cell} train-cvae: {e}"));
                        None
                    }
                }
            } else {
                None
            };
            for &algo in &cfg.algorithms {
                let clock = Instant::now();
                let trained = train_agent(algo, &prepared, cvae.as_ref(), &hp, cfg.cvae.samples, seed);
                let train_seconds = clock.elapsed().as_secs_f64();
                let evaluated = trained.and_then(|t| {
                    let rel = format!("{cell}/{}.ckpt", algo.name());
                    let curve = format!("{cell}/{}_curve.csv", algo.name());
                    write_checkpoint(&out.join(&rel), &t.checkpoint)?;
                    std::fs::write(out.join(&curve), &t.curve_csv)?;
                    for r in [&rel, &curve] {
                        artifacts.insert(r.clone(), sha256_file(&out.join(r))?);
                    }
                    let ev = data_dir.evaluate(&net, policy_from_checkpoint(&t.checkpoint)?.as_mut())?;
                    Ok((rel, ev))
                });
                match evaluated {
                    Ok((rel, ev)) => {
                        timing.push(TimingRecord { p_mod, seed, method: algo.name().into(), train_seconds, decision_seconds: ev.latency });
                        results.push(CellResult {
                            p_mod,
                            seed,
                            method: algo.name().into(),
                            weekly_cost: Some(ev.total_cost),
                            non_converged: ev.non_converged,
                            status: "ok".into(),
                            checkpoint: rel,
                        });
                    }
                    Err(e) => {
                        failures.push(format!("{cell} {}: {e}", algo.name()));
                        results.push(fail(algo.name(), &e));
                    }
                }
            }
            write_csv(&out.join(RESULTS_FILE), &results)?;
        }
    }
    let mut methods: Vec<String> = cfg.algorithms.iter().map(|a| a.name().to_string()).collect();
    methods.extend(["historical".to_string(), "stay".to_string()]);
    let table = report_costs(&results, &cfg.p_mod, &methods);
    write_csv(&out.join(RESULTS_FILE), &results)?;
    write_csv(&out.join(TIMING_FILE), &timing)?;
    std::fs::write(out.join(TABLE_FILE), table.to_csv())?;
    let manifest = RunManifest { config: cfg.clone(), hyper: hp, datasets, artifacts, failures };
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentOutput { results, timing, manifest, table })
}

/// Median weekly cost over seeds: one row per method, one column per P_mod.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub p_mod: Vec<f64>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub footnotes: Vec<String>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Cells without any successful seed are left blank with a footnote.
pub fn report_costs(results: &[CellResult], p_mod: &[f64], methods: &[String]) -> CostTable {
    let mut rows = Vec::new();
    let mut footnotes = Vec::new();
    for method in methods {
        let mut row = Vec::new();
        for &p in p_mod {
            let mut costs: Vec<f64> = results
                .iter()
                .filter(|r| &r.method == method && r.p_mod == p)
                .filter_map(|r| r.weekly_cost)
                .collect();
            let cell = median(&mut costs);
            if cell.is_none() {
                footnotes.push(format!("{method} at P_mod={p}: no completed run"));
            }
            row.push(cell);
        }
        rows.push((method.clone(), row));
    }
    CostTable { p_mod: p_mod.to_vec(), rows, footnotes }
}

impl CostTable {
    pub fn get(&self, method: &str, p_mod: f64) -> Option<f64> {
        let col = self.p_mod.iter().position(|&p| p == p_mod)?;
        self.rows.iter().find(|(m, _)| m == method)?.1[col]
    }

    /// `method,pmod=...` header, one line per method, footnotes as `#` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for p in &self.p_mod {
            write!(s, ",pmod={p}").unwrap();
        }
        s.push('\n');
        for (method, row) in &self.rows {
            s.push_str(method);
            for c in row {
                match c {
                    Some(v) => write!(s, ",{v:.2}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        for f in &self.footnotes {
            writeln!(s, "# {f}").unwrap();
        }
        s
    }
}

/// Loads an agent checkpoint from disk and evaluates it on a dataset
/// directory's test week.
pub fn evaluate_checkpoint_file(model: &Path, data: &DataDir, net: &Network) -> Result<EvalResult> {
    let ckpt = read_checkpoint(model)?;
    data.evaluate(net, policy_from_checkpoint(&ckpt)?.as_mut())
}

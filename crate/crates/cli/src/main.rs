use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dnr_core::agents::{ActorPolicy, BcsacModel, HyperTable, Policy, PreparedData};
use dnr_core::behavior_data::{generate_dataset, DatasetSpec, ScenarioProbs};
use dnr_core::cvae::CvaeModel;
use dnr_core::env::HOURS_PER_WEEK;
use dnr_core::grid::Network;
use dnr_core::harness::{
    fit_behavior_model, policy_from_checkpoint, run_experiment, train_agent, write_data_dir, Algorithm, DataDir,
    DataManifest, ExperimentConfig, MANIFEST_FILE,
};
use dnr_core::nn::{read_checkpoint, write_checkpoint};
use dnr_core::tabular::verify_theory;
use dnr_core::topology::count_radial_configurations;
use dnr_core::seeded_rng;

#[derive(Parser)]
#[command(name = "dnr", version, about = "Batch reinforcement learning for distribution network reconfiguration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a historical batch with the scenario-mixture behavior policy.
    GenData {
        #[arg(long)]
        feeder: String,
        #[arg(long)]
        pmod: f64,
        #[arg(long)]
        pfix: f64,
        #[arg(long)]
        prnd: f64,
        /// Total weeks; the last one is the test week.
        #[arg(long, default_value_t = 53)]
        weeks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.015)]
        target_loss_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the CVAE behavior model to a training batch.
    TrainCvae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feeder of the batch; read from the data manifest when omitted.
        #[arg(long)]
        feeder: Option<String>,
        #[arg(long)]
        hp: Option<PathBuf>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long, default_value_t = 6000)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train BCSAC, SAC or DQN from a fixed batch.
    Train {
        #[arg(long)]
        algo: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cvae: Option<PathBuf>,
        #[arg(long)]
        hp: Option<PathBuf>,
        #[arg(long)]
        feeder: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        /// Prior draws per state for the behavior marginal.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll a trained policy over the test week and write the hourly trace.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        feeder: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        week: String,
        /// Sample from the actor instead of taking its argmax.
        #[arg(long)]
        stochastic_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the exact number of radial configurations.
    CountConfigs { feeder: String },
    /// Check the regularized evaluation, improvement and iteration results
    /// on random finite MDPs.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full pipeline over a P_mod x seed grid from a config or run manifest.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn feeder_of(data: &Path, explicit: Option<String>) -> Result<Network> {
    let name = match explicit {
        Some(f) => f,
        None => {
            let text = std::fs::read_to_string(data.join(MANIFEST_FILE))
                .with_context(|| format!("no --feeder given and no manifest in {}", data.display()))?;
            serde_json::from_str::<DataManifest>(&text)?.feeder
        }
    };
    Ok(Network::load(&name)?)
}

fn hyper(hp: Option<PathBuf>, net: &Network) -> Result<HyperTable> {
    Ok(match hp {
        Some(p) => HyperTable::load(&p)?,
        None => HyperTable::preset(&net.name)?,
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::GenData { feeder, pmod, pfix, prnd, weeks, seed, target_loss_ratio, out } => {
            if weeks < 2 {
                bail!("at least two weeks are needed (training plus one test week)");
            }
            let net = Network::load(&feeder)?;
            let spec = DatasetSpec {
                probs: ScenarioProbs::new(pmod, pfix, prnd)?,
                train_weeks: weeks - 1,
                test_weeks: 1,
                target_loss_ratio,
                ..Default::default()
            };
            let g = generate_dataset(&net, &spec, seed)?;
            let m = write_data_dir(&out, &g, &spec, seed)?;
            println!(
                "{} training and {} test transitions, beta {:.6}, loss ratio {:.4}",
                g.train.len(),
                g.test.len(),
                m.beta,
                m.realized_loss_ratio
            );
        }
        Command::TrainCvae { data, out, feeder, hp, hidden, steps, batch, samples, seed } => {
            let net = feeder_of(&data, feeder)?;
            let dir = DataDir::load(&data, &net)?;
            let mut table = hyper(hp, &net)?;
            if let Some(h) = hidden {
                table.cvae.hidden_units = h;
            }
            let chp = table.cvae_hyper(batch, steps, samples);
            let (model, curve) = fit_behavior_model(&dir.train, &chp, seed)?;
            write_checkpoint(&out, &model.to_checkpoint(&chp))?;
            println!("final loss {:.6}", curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::Train { algo, data, cvae, hp, feeder, seed, steps, samples, out } => {
            let algo = Algorithm::parse(&algo)?;
            let net = feeder_of(&data, feeder)?;
            let dir = DataDir::load(&data, &net)?;
            let mut table = hyper(hp, &net)?;
            if let Some(s) = steps {
                table.shared.training_steps = s;
            }
            let behavior = match cvae {
                Some(p) => Some(CvaeModel::from_checkpoint(&read_checkpoint(&p)?)?),
                None if algo == Algorithm::Bcsac => bail!("bcsac needs --cvae"),
                None => None,
            };
            let prepared = PreparedData::from_dataset(&dir.train)?;
            let trained = train_agent(algo, &prepared, behavior.as_ref(), &table, samples, seed)?;
            std::fs::create_dir_all(out.join("checkpoints"))?;
            write_checkpoint(&out.join("model.ckpt"), &trained.checkpoint)?;
            for (step, ckpt) in &trained.series {
                write_checkpoint(&out.join("checkpoints").join(format!("step_{step:06}.ckpt")), ckpt)?;
            }
            std::fs::write(out.join("curve.csv"), &trained.curve_csv)?;
            println!("wrote {}", out.join("model.ckpt").display());
        }
        Command::Evaluate { model, feeder, data, week, stochastic_seed, out } => {
            if week != "test" {
                bail!("only the held-out test week can be evaluated");
            }
            let net = Network::load(&feeder)?;
            let dir = DataDir::load(&data, &net)?;
            let ckpt = read_checkpoint(&model)?;
            let mut policy: Box<dyn Policy> = match stochastic_seed {
                Some(s) => Box::new(ActorPolicy::stochastic(&BcsacModel::from_checkpoint(&ckpt)?, seeded_rng(s, 0))),
                None => policy_from_checkpoint(&ckpt)?,
            };
            let ev = dir.evaluate(&net, policy.as_mut())?;
            let mut w = csv::Writer::from_path(&out)?;
            for h in &ev.hourly {
                w.serialize(h)?;
            }
            w.flush()?;
            println!(
                "weekly cost {:.2} over {} hours ({} non-converged), {:.3} ms per decision",
                ev.total_cost,
                ev.hourly.len().min(HOURS_PER_WEEK),
                ev.non_converged,
                ev.latency * 1e3
            );
        }
        Command::CountConfigs { feeder } => {
            println!("{}", count_radial_configurations(&Network::load(&feeder)?)?);
        }
        Command::VerifyTheory { instances, seed } => {
            let r = verify_theory(instances, &mut seeded_rng(seed, 0))?;
            let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
            println!("instances {}", r.instances);
            println!("{} evaluation contraction: worst ratio excess over gamma {:.3e}", verdict(r.contraction_ok()), r.contraction_excess);
            println!("{} evaluation fixed point vs linear solve: worst gap {:.3e}", verdict(r.oracle_ok()), r.oracle_gap);
            println!("{} policy improvement: worst margin {:.3e}", verdict(r.improvement_ok()), r.improvement_margin);
            println!(
                "{} policy iteration optimality over {} instances: worst margin {:.3e}",
                verdict(r.optimality_ok()),
                r.optimality_instances,
                r.optimality_margin
            );
            if !r.passed() {
                std::process::exit(1);
            }
        }
        Command::RunExperiment { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let res = run_experiment(&cfg)?;
            print!("{}", res.table.to_csv());
            for f in &res.manifest.failures {
                eprintln!("failed: {f}");
            }
        }
    }
    Ok(())
}

//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any FAIL.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{calibrated_frames, nodal_losses, nodal_voltages, random_configuration};
use dnr_core::agents::{
    actor_surrogate_and_grad, evaluate_weekly_cost, expected_actor_gradient, regression_loss_and_grad, ActorPolicy,
    BcsacModel, DqnModel, DqnPolicy, HyperTable, PreparedData,
};
use dnr_core::behavior_data::{behavior_distribution, generate_dataset, DatasetSpec, ScenarioProbs};
use dnr_core::cvae::{avg_tv_distance, CvaeModel, CvaeSample};
use dnr_core::env::env_step_count;
use dnr_core::grid::{solve_power_flow, Network};
use dnr_core::harness::{train_agent, Algorithm, CvaeRunSettings, DataDir, ExperimentConfig};
use dnr_core::nn::{finite_diff_check, read_checkpoint, Mlp};
use dnr_core::seeded_rng;
use dnr_core::tabular::verify_theory;
use dnr_core::topology::count_radial_configurations;
use ndarray::Array2;
use num_bigint::BigInt;
use rand::RngExt;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

const FEEDER: &str = "16bus";
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_COORDS: usize = 400;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn counts() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, expected) in [("16bus", "190"), ("33bus", "50751")] {
        let net = Network::builtin(name).map_err(|e| e.to_string())?;
        let clock = Instant::now();
        let n = count_radial_configurations(&net).map_err(|e| e.to_string())?;
        let secs = clock.elapsed().as_secs_f64();
        ok &= n.to_string() == expected && secs < 5.0;
        lines.push(format!("{name} {n} (want {expected}, {secs:.3} s)"));
    }
    for (name, published) in [("70bus", "22621020015"), ("119bus", "3853525605824176")] {
        let net = Network::builtin(name).map_err(|e| e.to_string())?;
        let clock = Instant::now();
        let n = count_radial_configurations(&net).map_err(|e| e.to_string())?;
        let secs = clock.elapsed().as_secs_f64();
        ok &= secs < 5.0;
        let tag = if n == published.parse::<BigInt>().unwrap() { "matches" } else { "MISMATCH with" };
        lines.push(format!("{name} {n} {tag} published {published} ({secs:.3} s)"));
    }
    check(ok, lines.join("; "))
}

fn theory() -> Outcome {
    let clock = Instant::now();
    let r = verify_theory(1000, &mut seeded_rng(0, 0)).map_err(|e| e.to_string())?;
    let secs = clock.elapsed().as_secs_f64();
    check(
        r.passed() && secs < 120.0,
        format!(
            "{} MDPs, contraction excess {:.2e}, oracle gap {:.2e}, improvement margin {:.2e}, optimality margin {:.2e} on {} instances, {secs:.1} s",
            r.instances, r.contraction_excess, r.oracle_gap, r.improvement_margin, r.optimality_margin, r.optimality_instances
        ),
    )
}

/// One-week 16-bus batch.
fn small_batch(seed: u64) -> dnr_core::behavior_data::GeneratedData {
    let net = Network::builtin(FEEDER).unwrap();
    let spec = DatasetSpec {
        probs: ScenarioProbs::from_ratio(0.5, 4.0).unwrap(),
        train_weeks: 1,
        calibration_hours: 24,
        ..Default::default()
    };
    generate_dataset(&net, &spec, seed).unwrap()
}

fn critic_rows(data: &PreparedData, idx: &[usize], closes: &[usize]) -> Array2<f64> {
    let d = data.state_dim;
    let mut x = Array2::zeros((idx.len(), d + data.m));
    for (r, (&k, &i)) in idx.iter().zip(closes).enumerate() {
        x.slice_mut(ndarray::s![r, ..d]).assign(&data.s.row(k));
        x[[r, d + i]] = 1.0;
    }
    x
}

fn gradients() -> Outcome {
    let g = small_batch(11);
    let data = PreparedData::from_dataset(&g.train).map_err(|e| e.to_string())?;
    let table = HyperTable::preset(FEEDER).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(12, 0);
    let model = BcsacModel::new("bcsac", data.state_dim, data.m, table.bcsac, &table.shared, &mut rng);
    let idx = data.sample_indices(16, &mut rng);
    let targets: Vec<f64> = (0..idx.len()).map(|_| rng.random_range(-2.0..0.0)).collect();
    let mut worst = Vec::new();

    let closes: Vec<usize> = idx.iter().map(|&k| data.actions[k].close_i).collect();
    let opens: Vec<usize> = idx.iter().map(|&k| data.actions[k].open_j).collect();
    let xq = critic_rows(&data, &idx, &closes);
    let (_, gq) = regression_loss_and_grad(&model.q1, xq.view(), &opens, &targets).map_err(|e| e.to_string())?;
    let mut q = model.q1.clone();
    let r = finite_diff_check(&mut q, &gq, |n: &Mlp| regression_loss_and_grad(n, xq.view(), &opens, &targets).unwrap().0, GRAD_EPS, GRAD_COORDS, &mut rng);
    worst.push(("critic", r.max_rel_error));

    let xv = data.s.select(ndarray::Axis(0), &idx);
    let zeros = vec![0; idx.len()];
    let (_, gv) = regression_loss_and_grad(&model.v, xv.view(), &zeros, &targets).map_err(|e| e.to_string())?;
    let mut v = model.v.clone();
    let r = finite_diff_check(&mut v, &gv, |n: &Mlp| regression_loss_and_grad(n, xv.view(), &zeros, &targets).unwrap().0, GRAD_EPS, GRAD_COORDS, &mut rng);
    worst.push(("value", r.max_rel_error));

    let a_hat = model.sample_actions(&data, &idx, &mut rng).map_err(|e| e.to_string())?;
    let coefs: Vec<f64> = (0..idx.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let feasible: Vec<&[usize]> = idx.iter().map(|&k| data.feasible[k].as_slice()).collect();
    let pos: Vec<usize> = a_hat.iter().map(|a| a.pos).collect();
    let (_, ga) = actor_surrogate_and_grad(&model.actor, xv.view(), &feasible, &pos, &coefs).map_err(|e| e.to_string())?;
    let mut actor = model.actor.clone();
    let r = finite_diff_check(&mut actor, &ga, |n: &Mlp| actor_surrogate_and_grad(n, xv.view(), &feasible, &pos, &coefs).unwrap().0, GRAD_EPS, GRAD_COORDS, &mut rng);
    worst.push(("actor", r.max_rel_error));

    let mut chp = table.cvae_hyper(8, 1, 1);
    chp.hidden = 64;
    let cvae = CvaeModel::new(data.state_dim, data.m, &chp, &mut rng);
    let batch: Vec<CvaeSample> = idx.iter().take(8).map(|&k| CvaeSample::from(&g.train.transitions[k])).collect();
    let xi = Array2::from_shape_simple_fn((batch.len(), chp.latent), || rng.sample(StandardNormal));
    let (_, gc) = cvae.loss_and_grads_with_noise(&batch, &xi).map_err(|e| e.to_string())?;
    let mut params = vec![cvae.encoder.clone(), cvae.decoder.clone()];
    let loss = |p: &Vec<Mlp>| {
        let m = CvaeModel { encoder: p[0].clone(), decoder: p[1].clone(), ..cvae.clone() };
        m.loss_with_noise(&batch, &xi).unwrap().loss
    };
    let r = finite_diff_check(&mut params, &gc, loss, GRAD_EPS, GRAD_COORDS, &mut rng);
    worst.push(("cvae", r.max_rel_error));

    let ok = worst.iter().all(|(_, e)| *e <= GRAD_TOL);
    check(ok, worst.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", "))
}

fn actor_identities() -> Outcome {
    let g = small_batch(13);
    let data = PreparedData::from_dataset(&g.train).map_err(|e| e.to_string())?;
    let table = HyperTable::preset(FEEDER).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(14, 0);
    let model = BcsacModel::new("bcsac", data.state_dim, data.m, table.bcsac, &table.shared, &mut rng);
    if data.state_dim != g.train.header.norms.feature_dim(data.m) {
        return Err(format!("state width {} is not the feeder feature width", data.state_dim));
    }
    let tau = table.bcsac.temperature;
    let (mut shift_gap, mut sac_gap) = (0.0f64, 0.0f64);
    for k in data.sample_indices(20, &mut rng) {
        let s = data.s.row(k).to_vec();
        let feasible = &data.feasible[k];
        let qt = model.q_table(&s);
        let q: Vec<f64> = feasible.iter().map(|&c| qt[c]).collect();
        let lb: Vec<f64> = {
            let w: Vec<f64> = feasible.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| (x / z).ln()).collect()
        };
        let c = rng.random_range(-50.0..50.0);
        let base = expected_actor_gradient(&model.actor, &s, feasible, &|a, lp| q[a] - tau * (lp - lb[a])).unwrap();
        let shifted = expected_actor_gradient(&model.actor, &s, feasible, &|a, lp| q[a] - tau * (lp - lb[a]) + c).unwrap();
        let uniform = -(feasible.len() as f64).ln();
        let bc = expected_actor_gradient(&model.actor, &s, feasible, &|a, lp| q[a] - tau * (lp - uniform)).unwrap();
        let sac = expected_actor_gradient(&model.actor, &s, feasible, &|a, lp| q[a] - tau * lp).unwrap();
        for (a, b) in base.flat_params().iter().zip(shifted.flat_params()) {
            shift_gap = shift_gap.max((a - b).abs());
        }
        for (a, b) in bc.flat_params().iter().zip(sac.flat_params()) {
            sac_gap = sac_gap.max((a - b).abs());
        }
    }
    check(shift_gap <= 1e-10 && sac_gap <= 1e-10, format!("shift gap {shift_gap:.2e}, uniform-behavior vs SAC gap {sac_gap:.2e} over 20 states"))
}

fn power_flow() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for name in ["16bus", "33bus"] {
        let net = Network::builtin(name).unwrap();
        let frames = calibrated_frames(&net, 1);
        let mut rng = seeded_rng(2, 0);
        let (mut vgap, mut lgap, mut checked) = (0.0f64, 0.0f64, 0);
        while checked < 100 {
            let frame = &frames[rng.random_range(0..frames.len())];
            let cfg = random_configuration(&net, rng.random_range(0..4), &mut rng);
            let sol = solve_power_flow(&net, &cfg, frame).map_err(|e| e.to_string())?;
            if !sol.converged {
                continue;
            }
            let oracle = nodal_voltages(&net, &cfg, frame);
            vgap = vgap.max(sol.voltage.iter().zip(&oracle).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
            let i2r: f64 = net.branches.iter().enumerate().map(|(k, b)| sol.branch_current[k].norm_sqr() * b.r_pu).sum();
            lgap = lgap.max((sol.losses_pu - i2r).abs());
            let _ = nodal_losses(&net, &cfg, &oracle);
            checked += 1;
        }
        ok &= vgap <= 1e-6 && lgap <= 1e-8;
        lines.push(format!("{name} voltage gap {vgap:.2e} p.u., loss identity gap {lgap:.2e} p.u."));
    }
    check(ok, lines.join("; "))
}

fn ordering(out: &Path) -> Outcome {
    let cfg = ExperimentConfig {
        feeder: FEEDER.into(),
        p_mod: vec![0.1, 0.5, 1.0],
        seeds: vec![1, 2, 3, 4, 5],
        output_dir: out.to_path_buf(),
        cvae: CvaeRunSettings { hidden: Some(128), ..Default::default() },
        ..Default::default()
    };
    let clock = Instant::now();
    let res = dnr_core::harness::run_experiment(&cfg).map_err(|e| e.to_string())?;
    let secs = clock.elapsed().as_secs_f64();
    let get = |m: &str, p: f64| res.table.get(m, p).unwrap_or(f64::NAN);
    let mut ok = secs < 1800.0 && res.manifest.failures.is_empty();
    let mut lines = Vec::new();
    for p in [0.1, 0.5] {
        let (b, s, d, h) = (get("bcsac", p), get("sac", p), get("dqn", p), get("historical", p));
        ok &= b <= s && b <= d;
        lines.push(format!("P_mod {p}: bcsac {b:.0} sac {s:.0} dqn {d:.0} historical {h:.0}"));
    }
    ok &= get("bcsac", 0.1) < get("historical", 0.1);
    lines.push(format!("{} failures, {secs:.0} s", res.manifest.failures.len()));
    check(ok, lines.join("; "))
}

fn cell(out: &Path) -> std::path::PathBuf {
    out.join("pmod0.5_seed1")
}

fn cvae_quality(out: &Path) -> Outcome {
    let net = Network::builtin(FEEDER).unwrap();
    let dir = DataDir::load(&cell(out).join("data"), &net).map_err(|e| e.to_string())?;
    let trained = CvaeModel::from_checkpoint(&read_checkpoint(&cell(out).join("cvae.ckpt")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let probs = dir.train.header.probs.ok_or("dataset has no scenario probabilities")?;
    let probs = ScenarioProbs::new(probs[0], probs[1], probs[2]).map_err(|e| e.to_string())?;
    let stride = dir.train.len() / 300;
    let refs: Vec<(&[f64], _, Vec<f64>)> = dir
        .train
        .transitions
        .iter()
        .step_by(stride.max(1))
        .map(|t| (t.s.as_slice(), &t.mask, behavior_distribution(&probs, &t.mask, t.greedy.expect("greedy action recorded")).unwrap()))
        .collect();
    let mut table = HyperTable::preset(FEEDER).unwrap();
    table.cvae.hidden_units = 128;
    let chp = table.cvae_hyper(64, 6000, 10);
    let fresh = CvaeModel::new(trained.state_dim, trained.m, &chp, &mut seeded_rng(21, 0));
    let tv = avg_tv_distance(&trained, &refs, 50, &mut seeded_rng(22, 0)).map_err(|e| e.to_string())?;
    let tv0 = avg_tv_distance(&fresh, &refs, 50, &mut seeded_rng(22, 0)).map_err(|e| e.to_string())?;
    check(tv <= 0.3 && tv < tv0, format!("trained TV {tv:.4}, untrained TV {tv0:.4} over {} states", refs.len()))
}

fn batch_contract(out: &Path) -> Outcome {
    let net = Network::builtin(FEEDER).unwrap();
    let dir = DataDir::load(&cell(out).join("data"), &net).map_err(|e| e.to_string())?;
    let prepared = PreparedData::from_dataset(&dir.train).map_err(|e| e.to_string())?;
    let behavior = CvaeModel::from_checkpoint(&read_checkpoint(&cell(out).join("cvae.ckpt")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut table = HyperTable::preset(FEEDER).unwrap();
    table.shared.training_steps = 500;
    let before = env_step_count();
    for algo in [Algorithm::Bcsac, Algorithm::Sac, Algorithm::Dqn] {
        train_agent(algo, &prepared, Some(&behavior), &table, 10, 1).map_err(|e| e.to_string())?;
    }
    let training_steps = env_step_count() - before;

    let env = dir.env(&net).map_err(|e| e.to_string())?;
    let norms = &dir.train.header.norms;
    let fallback = dir.fallback_cost();
    let actor = BcsacModel::from_checkpoint(&read_checkpoint(&cell(out).join("bcsac.ckpt")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let dqn = DqnModel::from_checkpoint(&read_checkpoint(&cell(out).join("dqn.ckpt")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let tr = &dir.train.transitions;
    let mut sampled = ActorPolicy::stochastic(&actor, seeded_rng(23, 0));
    let a = evaluate_weekly_cost(&env, norms, &mut sampled, &tr[0].config, tr[0].t, 8000, fallback).map_err(|e| e.to_string())?;
    let mut greedy = DqnPolicy(dqn);
    let b = evaluate_weekly_cost(&env, norms, &mut greedy, &tr[6000].config, tr[6000].t, 2000, fallback).map_err(|e| e.to_string())?;
    let steps = a.hourly.len() + b.hourly.len();
    check(
        training_steps == 0 && steps == 10_000,
        format!("environment steps during training {training_steps}; {steps} evaluation steps with no masked-out action"),
    )
}

fn main() {
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run");
    let _ = std::fs::remove_dir_all(&out);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("configuration counts", Box::new(counts)),
        ("regularized policy iteration theory", Box::new(theory)),
        ("analytic gradients vs finite differences", Box::new(gradients)),
        ("expected actor-gradient identities", Box::new(actor_identities)),
        ("sweep vs nodal power flow", Box::new(power_flow)),
        ("end-to-end cost ordering", Box::new(|| ordering(&out))),
        ("CVAE behavior fidelity", Box::new(|| cvae_quality(&out))),
        ("batch-only training and masked evaluation", Box::new(|| batch_contract(&out))),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = clock.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {} {name}: {msg} [{secs:.1} s]", k + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} {name}: {msg} [{secs:.1} s]", k + 1)
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

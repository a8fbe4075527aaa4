//! Shared oracles for the integration tests.
#![allow(dead_code)]

use dnr_core::behavior_data::{calibrate_beta, calibration_hours, synthetic_library, SyntheticLoadSpec};
use dnr_core::grid::{InjectionFrame, Network};
use dnr_core::seeded_rng;
use dnr_core::topology::{apply_pair, switch_pair_mask, Configuration};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, RngExt};

/// Nodal voltages from a Z-bus Gauss iteration on the bus admittance matrix:
/// V_L = Y_LL⁻¹ (conj(S_L / V_L) − Y_LS V_S), substations held at 1∠0.
pub fn nodal_voltages(net: &Network, config: &Configuration, frame: &InjectionFrame) -> Vec<Complex64> {
    let n = net.bus_count();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for (k, br) in net.branches.iter().enumerate() {
        if !config.is_closed(k) {
            continue;
        }
        let adm = Complex64::new(1.0, 0.0) / Complex64::new(br.r_pu, br.x_pu);
        y[(br.from, br.from)] += adm;
        y[(br.to, br.to)] += adm;
        y[(br.from, br.to)] -= adm;
        y[(br.to, br.from)] -= adm;
    }
    let loads: Vec<usize> = (0..n).filter(|&b| !net.is_substation(b)).collect();
    let slack: Vec<usize> = net.substations().to_vec();
    let y_ll = DMatrix::from_fn(loads.len(), loads.len(), |r, c| y[(loads[r], loads[c])]);
    let lu = y_ll.lu();
    let mut v = vec![Complex64::new(1.0, 0.0); n];
    for _ in 0..1000 {
        let rhs = nalgebra::DVector::from_fn(loads.len(), |r, _| {
            let b = loads[r];
            let s = Complex64::new(frame.p[b], frame.q[b]);
            let mut i = (s / v[b]).conj();
            for &k in &slack {
                i -= y[(b, k)] * v[k];
            }
            i
        });
        let next = lu.solve(&rhs).expect("radial admittance block is invertible");
        let mut change: f64 = 0.0;
        for (r, &b) in loads.iter().enumerate() {
            change = change.max((next[r] - v[b]).norm());
            v[b] = next[r];
        }
        if change < 1e-14 {
            break;
        }
    }
    v
}

/// Σ over closed branches of |ΔV|² r / |z|².
pub fn nodal_losses(net: &Network, config: &Configuration, v: &[Complex64]) -> f64 {
    net.branches
        .iter()
        .enumerate()
        .filter(|(k, _)| config.is_closed(*k))
        .map(|(_, br)| {
            let z = Complex64::new(br.r_pu, br.x_pu);
            ((v[br.from] - v[br.to]) / z).norm_sqr() * br.r_pu
        })
        .sum()
}

/// Calibrated synthetic frames for `feeder` (four weeks of hours).
pub fn calibrated_frames(net: &Network, seed: u64) -> Vec<InjectionFrame> {
    let spec = SyntheticLoadSpec { weeks: 4, ..Default::default() };
    let lib = synthetic_library(net, &spec, &mut seeded_rng(seed, 0)).unwrap();
    let beta = calibrate_beta(net, &lib, &net.base_configuration(), 0.015, &calibration_hours(lib.hours, 96)).unwrap();
    lib.frames(net, beta, 0, lib.hours)
}

/// Configuration reached by `steps` uniformly drawn mask pairs.
pub fn random_configuration<R: Rng + ?Sized>(net: &Network, steps: usize, rng: &mut R) -> Configuration {
    let mut cfg = net.base_configuration();
    for _ in 0..steps {
        let mask = switch_pair_mask(net, &cfg).unwrap();
        let (i, j) = mask.pairs().nth(rng.random_range(0..mask.count())).unwrap();
        cfg = apply_pair(&cfg, &mask, i, j).unwrap();
    }
    cfg
}

/// Every radial configuration by exhaustive enumeration (small feeders).
pub fn all_radial_configurations(net: &Network) -> Vec<Configuration> {
    let m = net.branch_count();
    assert!(m <= 24, "exhaustive enumeration is for small feeders");
    let closed = net.bus_count() - net.substation_count();
    (0u32..1 << m)
        .filter(|bits| bits.count_ones() as usize == closed)
        .map(|bits| Configuration::new((0..m).map(|k| bits >> k & 1 == 1).collect()))
        .filter(|cfg| dnr_core::topology::is_radial(net, cfg))
        .collect()
}

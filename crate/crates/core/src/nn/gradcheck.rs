use rand::seq::index;
use rand::Rng;

use super::Mlp;

/// Flat read/write access to a parameter set, used by the finite-difference checker.
pub trait ParamVector {
    fn param_len(&self) -> usize;
    fn param(&self, k: usize) -> f64;
    fn set_param(&mut self, k: usize, value: f64);
}

impl ParamVector for Mlp {
    fn param_len(&self) -> usize {
        self.param_count()
    }

    fn param(&self, k: usize) -> f64 {
        match self.locate(k) {
            (l, Some(rc), _) => self.layers[l].weight[rc],
            (l, None, b) => self.layers[l].bias[b],
        }
    }

    fn set_param(&mut self, k: usize, value: f64) {
        match self.locate(k) {
            (l, Some(rc), _) => self.layers[l].weight[rc] = value,
            (l, None, b) => self.layers[l].bias[b] = value,
        }
    }
}

/// Several networks addressed as one concatenated vector.
impl ParamVector for Vec<Mlp> {
    fn param_len(&self) -> usize {
        self.iter().map(|n| n.param_count()).sum()
    }

    fn param(&self, mut k: usize) -> f64 {
        for n in self {
            let len = n.param_count();
            if k < len {
                return n.param(k);
            }
            k -= len;
        }
        panic!("parameter index out of range");
    }

    fn set_param(&mut self, mut k: usize, value: f64) {
        for n in self.iter_mut() {
            let len = n.param_count();
            if k < len {
                return n.set_param(k, value);
            }
            k -= len;
        }
        panic!("parameter index out of range");
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative errors are taken against `max(|analytic|, |numeric|, 1e-6)`.
const REL_FLOOR: f64 = 1e-6;

/// Compares `analytic` with central differences of `loss` on up to `samples`
/// randomly chosen coordinates. `params` is restored on return.
pub fn finite_diff_check<P, F, R>(
    params: &mut P,
    analytic: &P,
    mut loss: F,
    eps: f64,
    samples: usize,
    rng: &mut R,
) -> GradCheckReport
where
    P: ParamVector,
    F: FnMut(&P) -> f64,
    R: Rng + ?Sized,
{
    let n = params.param_len();
    assert_eq!(n, analytic.param_len(), "gradient layout mismatch");
    let coords: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        index::sample(rng, n, samples).into_vec()
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    for k in coords {
        let orig = params.param(k);
        params.set_param(k, orig + eps);
        let plus = loss(params);
        params.set_param(k, orig - eps);
        let minus = loss(params);
        params.set_param(k, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.param(k);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    report
}

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngExt};

/// One affine layer, `y = x W + b` with `W` stored fan_in x fan_out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// ReLU hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs recorded by [`Mlp::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Zero-initialized network with layer widths `sizes[0] -> ... -> sizes[last]`.
    pub fn zeros(sizes: &[usize]) -> Mlp {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        Mlp {
            layers: sizes
                .windows(2)
                .map(|w| Dense {
                    weight: Array2::zeros((w[0], w[1])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
        }
    }

    /// Xavier/Glorot uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Mlp {
        let mut net = Mlp::zeros(sizes);
        for layer in &mut net.layers {
            let (fan_in, fan_out) = layer.weight.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        net
    }

    /// Hidden stack of `hidden_layers` layers of width `hidden` between input and output.
    pub fn sizes(input: usize, hidden: usize, hidden_layers: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden, hidden_layers));
        sizes.push(output);
        sizes
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.dim()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = affine(&self.layers[0], x);
        for (k, layer) in self.layers.iter().enumerate().skip(1) {
            h.mapv_inplace(relu);
            h = affine(layer, h.view());
            if k == last {
                break;
            }
        }
        h
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let mut h = affine(&self.layers[0], x);
        for layer in self.layers.iter().skip(1) {
            h.mapv_inplace(relu);
            let next = affine(layer, h.view());
            inputs.push(h);
            h = next;
        }
        (h, MlpTape { inputs })
    }

    /// Accumulates parameter gradients of `d_out` (dL/d output) into `grads`
    /// and returns dL/d input when `want_input` is set.
    pub fn backward_into(
        &self,
        tape: &MlpTape,
        d_out: Array2<f64>,
        grads: &mut Mlp,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let mut d = d_out;
        for k in (0..self.layers.len()).rev() {
            let input = &tape.inputs[k];
            ndarray::linalg::general_mat_mul(1.0, &input.t(), &d, 1.0, &mut grads.layers[k].weight);
            grads.layers[k].bias += &d.sum_axis(Axis(0));
            if k == 0 && !want_input {
                return None;
            }
            let mut d_in = d.dot(&self.layers[k].weight.t());
            if k > 0 {
                Zip::from(&mut d_in).and(input).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = d_in;
        }
        Some(d)
    }

    pub fn backward(&self, tape: &MlpTape, d_out: Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = self.zeros_like();
        let d_in = self.backward_into(tape, d_out, &mut grads, true).unwrap();
        (grads, d_in)
    }

    /// `self <- rho * self + (1 - rho) * source`.
    pub fn polyak_from(&mut self, source: &Mlp, rho: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut t.weight)
                .and(&s.weight)
                .for_each(|a, &b| *a = rho * *a + (1.0 - rho) * b);
            Zip::from(&mut t.bias)
                .and(&s.bias)
                .for_each(|a, &b| *a = rho * *a + (1.0 - rho) * b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Parameters in checkpoint order: per layer, weights row-major then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub(crate) fn locate(&self, mut k: usize) -> (usize, Option<(usize, usize)>, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            let wl = l.weight.len();
            if k < wl {
                let cols = l.weight.ncols();
                return (li, Some((k / cols, k % cols)), 0);
            }
            k -= wl;
            if k < l.bias.len() {
                return (li, None, k);
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

fn affine(layer: &Dense, x: ArrayView2<f64>) -> Array2<f64> {
    let mut h = x.dot(&layer.weight);
    h += &layer.bias;
    h
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_check, ParamVector};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::xavier(&[4, 3], &mut rng);
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(net.layers[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(net.layers[0].bias.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn xavier_is_seed_deterministic() {
        let a = Mlp::xavier(&[5, 7, 2], &mut ChaCha8Rng::seed_from_u64(9));
        let b = Mlp::xavier(&[5, 7, 2], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn xavier_variance_matches_uniform_moment() {
        // Var U(-a, a) = a^2 / 3 = 2 / (fan_in + fan_out).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::xavier(&[400, 250], &mut rng);
        let w = &net.layers[0].weight;
        let mean = w.mean().unwrap();
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 650.0;
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::xavier(&[6, 8, 8, 3], &mut rng);
        for l in &mut net.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let x = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |n: &Mlp| {
            let y = n.forward(x.view());
            (&y - &target).mapv(|v| v * v).sum() * 0.5
        };
        let (y, tape) = net.forward_tape(x.view());
        let (grads, _) = net.backward(&tape, &y - &target);
        let report = finite_diff_check(&mut net, &grads, loss, 1e-5, usize::MAX, &mut rng);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        assert_eq!(report.checked, net.param_len());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Mlp::xavier(&[3, 5, 2], &mut rng);
        let x = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
        let (y, tape) = net.forward_tape(x.view());
        let (_, dx) = net.backward(&tape, Array2::ones(y.dim()));
        for k in 0..3 {
            let mut xp = x.clone();
            xp[[0, k]] += 1e-6;
            let mut xm = x.clone();
            xm[[0, k]] -= 1e-6;
            let num = (net.forward(xp.view()).sum() - net.forward(xm.view()).sum()) / 2e-6;
            assert!((num - dx[[0, k]]).abs() < 1e-7);
        }
    }

    #[test]
    fn polyak_average() {
        let mut target = Mlp::zeros(&[2, 2]);
        target.layers[0].weight.fill(1.0);
        let source = Mlp::zeros(&[2, 2]);
        target.polyak_from(&source, 0.5);
        assert!(target.layers[0].weight.iter().all(|v| *v == 0.5));
        let copy = target.clone();
        target.polyak_from(&copy, 0.995);
        assert_eq!(target, copy);
    }
}

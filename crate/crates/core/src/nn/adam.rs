use ndarray::Zip;

use super::Mlp;
use crate::{DnrError, Result};

/// Bias-corrected Adam with per-parameter moment buffers shaped like the model.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Mlp,
    v: Mlp,
}

impl AdamState {
    pub fn new(model: &Mlp, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    /// Descends along `grads`. Non-finite gradients leave model and state untouched.
    pub fn step(&mut self, model: &mut Mlp, grads: &Mlp) -> Result<()> {
        if model.shapes() != grads.shapes() || model.shapes() != self.m.shapes() {
            return Err(DnrError::Contract("gradient shapes do not match the model".into()));
        }
        if !grads.is_finite() {
            return Err(DnrError::NonFinite("Adam update rejected: gradient contains NaN or inf".into()));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (k, layer) in model.layers.iter_mut().enumerate() {
            let (ml, vl, gl) = (&mut self.m.layers[k], &mut self.v.layers[k], &grads.layers[k]);
            Zip::from(&mut layer.weight)
                .and(&mut ml.weight)
                .and(&mut vl.weight)
                .and(&gl.weight)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut ml.bias)
                .and(&mut vl.bias)
                .and(&gl.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

//! Conditional VAE over the flattened switch-pair table, used as a stand-in
//! for the unknown behavior policy.

use ndarray::{s, Array2};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{DnrAction, Transition};
use crate::nn::{masked_log_softmax, masked_softmax, AdamState, Checkpoint, Mlp};
use crate::topology::SwitchPairMask;
use crate::{DnrError, Result};

/// Probability floor applied before logarithms of behavior probabilities.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvaeHyper {
    pub learning_rate: f64,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub latent: usize,
    pub batch: usize,
    pub steps: usize,
    /// Latent samples used to marginalize the decoder.
    pub samples: usize,
}

impl Default for CvaeHyper {
    fn default() -> Self {
        CvaeHyper {
            learning_rate: 1e-4,
            hidden: 1400,
            hidden_layers: 2,
            latent: 20,
            batch: 64,
            steps: 6000,
            samples: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    /// (state, one-hot action) -> (mean, log-variance) of the latent.
    pub encoder: Mlp,
    /// (state, latent) -> m*m logits.
    pub decoder: Mlp,
    pub state_dim: usize,
    pub latent: usize,
    pub m: usize,
}

/// One training example.
#[derive(Debug, Clone, Copy)]
pub struct CvaeSample<'a> {
    pub s: &'a [f64],
    pub action: DnrAction,
    pub mask: &'a SwitchPairMask,
}

impl<'a> From<&'a Transition> for CvaeSample<'a> {
    fn from(t: &'a Transition) -> Self {
        CvaeSample { s: &t.s, action: t.action, mask: &t.mask }
    }
}

#[derive(Debug, Clone)]
pub struct CvaeLoss {
    /// Mean negative ELBO over the batch.
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dimensions.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

impl CvaeModel {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, m: usize, hp: &CvaeHyper, rng: &mut R) -> Self {
        let encoder = Mlp::xavier(&Mlp::sizes(state_dim + m * m, hp.hidden, hp.hidden_layers, 2 * hp.latent), rng);
        let decoder = Mlp::xavier(&Mlp::sizes(state_dim + hp.latent, hp.hidden, hp.hidden_layers, m * m), rng);
        CvaeModel { encoder, decoder, state_dim, latent: hp.latent, m }
    }

    fn encoder_input(&self, batch: &[CvaeSample]) -> Array2<f64> {
        let mut x = Array2::zeros((batch.len(), self.state_dim + self.m * self.m));
        for (r, b) in batch.iter().enumerate() {
            x.slice_mut(s![r, ..self.state_dim]).assign(&ndarray::ArrayView1::from(b.s));
            x[[r, self.state_dim + b.action.flat(self.m)]] = 1.0;
        }
        x
    }

    /// Negative ELBO with one reparameterized latent per example, using the
    /// supplied standard-normal draws `xi` (batch x latent).
    pub fn loss_with_noise(&self, batch: &[CvaeSample], xi: &Array2<f64>) -> Result<CvaeLoss> {
        Ok(self.forward_backward(batch, xi, false)?.0)
    }

    /// Loss and gradients `[encoder, decoder]` for fixed noise `xi`.
    pub fn loss_and_grads_with_noise(&self, batch: &[CvaeSample], xi: &Array2<f64>) -> Result<(CvaeLoss, Vec<Mlp>)> {
        let (loss, grads) = self.forward_backward(batch, xi, true)?;
        Ok((loss, grads.unwrap()))
    }

    pub fn loss_and_grads<R: Rng + ?Sized>(&self, batch: &[CvaeSample], rng: &mut R) -> Result<(CvaeLoss, Vec<Mlp>)> {
        let xi = Array2::from_shape_simple_fn((batch.len(), self.latent), || rng.sample(StandardNormal));
        self.loss_and_grads_with_noise(batch, &xi)
    }

    fn forward_backward(&self, batch: &[CvaeSample], xi: &Array2<f64>, want_grads: bool) -> Result<(CvaeLoss, Option<Vec<Mlp>>)> {
        let n = batch.len();
        if n == 0 {
            return Err(DnrError::Contract("empty CVAE batch".into()));
        }
        let mut feasible = Vec::with_capacity(n);
        for b in batch {
            if !b.mask.contains(b.action.close_i, b.action.open_j) {
                return Err(DnrError::Contract(format!(
                    "action ({}, {}) is infeasible under its mask",
                    b.action.close_i, b.action.open_j
                )));
            }
            feasible.push(b.mask.flat_indices());
        }
        let dz = self.latent;
        let (h, enc_tape) = self.encoder.forward_tape(self.encoder_input(batch).view());
        let mu = h.slice(s![.., ..dz]).to_owned();
        let logvar = h.slice(s![.., dz..]).to_owned();
        let sigma = logvar.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&sigma * xi);
        let mut dec_in = Array2::zeros((n, self.state_dim + dz));
        for (r, b) in batch.iter().enumerate() {
            dec_in.slice_mut(s![r, ..self.state_dim]).assign(&ndarray::ArrayView1::from(b.s));
        }
        dec_in.slice_mut(s![.., self.state_dim..]).assign(&z);
        let (logits, dec_tape) = self.decoder.forward_tape(dec_in.view());

        let inv_n = 1.0 / n as f64;
        let mut recon = 0.0;
        let mut kl = 0.0;
        let mut d_logits = Array2::zeros(logits.dim());
        for r in 0..n {
            let row = logits.row(r);
            let row = row.as_slice().unwrap();
            let target = batch[r].action.flat(self.m);
            let lp = masked_log_softmax(row, &feasible[r])?;
            let pos = feasible[r].iter().position(|&k| k == target).unwrap();
            recon -= lp[pos];
            kl += gaussian_kl(mu.row(r).as_slice().unwrap(), logvar.row(r).as_slice().unwrap());
            if want_grads {
                for (&k, l) in feasible[r].iter().zip(&lp) {
                    d_logits[[r, k]] = inv_n * (l.exp() - if k == target { 1.0 } else { 0.0 });
                }
            }
        }
        let loss = CvaeLoss {
            loss: (recon + kl) * inv_n,
            reconstruction: recon * inv_n,
            kl: kl * inv_n,
        };
        if !loss.loss.is_finite() {
            return Err(DnrError::NonFinite(format!("CVAE loss is {}", loss.loss)));
        }
        if !want_grads {
            return Ok((loss, None));
        }
        let mut dec_grads = self.decoder.zeros_like();
        let d_dec_in = self.decoder.backward_into(&dec_tape, d_logits, &mut dec_grads, true).unwrap();
        let d_z = d_dec_in.slice(s![.., self.state_dim..]).to_owned();
        let mut d_h = Array2::zeros(h.dim());
        for r in 0..n {
            for k in 0..dz {
                let (m, lv, g) = (mu[[r, k]], logvar[[r, k]], d_z[[r, k]]);
                d_h[[r, k]] = g + inv_n * m;
                d_h[[r, dz + k]] = g * xi[[r, k]] * 0.5 * sigma[[r, k]] + inv_n * 0.5 * (lv.exp() - 1.0);
            }
        }
        let mut enc_grads = self.encoder.zeros_like();
        self.encoder.backward_into(&enc_tape, d_h, &mut enc_grads, false);
        Ok((loss, Some(vec![enc_grads, dec_grads])))
    }

    /// Decoder distributions over the m*m table averaged over `noise` rows
    /// (each a latent draw), for one state.
    pub fn behavior_distribution_with(&self, s: &[f64], mask: &SwitchPairMask, noise: &Array2<f64>) -> Result<Vec<f64>> {
        let l = noise.nrows();
        if l == 0 {
            return Err(DnrError::Contract("behavior marginal needs at least one latent sample".into()));
        }
        let mut dec_in = Array2::zeros((l, self.state_dim + self.latent));
        for r in 0..l {
            dec_in.slice_mut(s![r, ..self.state_dim]).assign(&ndarray::ArrayView1::from(s));
        }
        dec_in.slice_mut(s![.., self.state_dim..]).assign(noise);
        let logits = self.decoder.forward(dec_in.view());
        let feasible = mask.flat_indices();
        let mut avg = vec![0.0; self.m * self.m];
        for r in 0..l {
            let p = masked_softmax(logits.row(r).as_slice().unwrap(), &feasible)?;
            for &k in &feasible {
                avg[k] += p[k];
            }
        }
        for &k in &feasible {
            avg[k] /= l as f64;
        }
        Ok(avg)
    }

    /// Monte Carlo marginal g(.|s) over `samples` prior draws of z.
    pub fn behavior_distribution<R: Rng + ?Sized>(&self, s: &[f64], mask: &SwitchPairMask, samples: usize, rng: &mut R) -> Result<Vec<f64>> {
        let noise = Array2::from_shape_simple_fn((samples, self.latent), || rng.sample(StandardNormal));
        self.behavior_distribution_with(s, mask, &noise)
    }

    /// g(a|s) before flooring.
    pub fn behavior_prob<R: Rng + ?Sized>(&self, s: &[f64], mask: &SwitchPairMask, action: DnrAction, samples: usize, rng: &mut R) -> Result<f64> {
        Ok(self.behavior_distribution(s, mask, samples, rng)?[action.flat(self.m)])
    }

    pub fn to_checkpoint(&self, hp: &CvaeHyper) -> Checkpoint {
        Checkpoint::new(serde_json::json!({
            "kind": "cvae",
            "state_dim": self.state_dim,
            "latent": self.latent,
            "m": self.m,
            "hyper": hp,
        }))
        .with("encoder", &self.encoder)
        .with("decoder", &self.decoder)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<CvaeModel> {
        let meta = &ckpt.metadata;
        if meta["kind"] != "cvae" {
            return Err(DnrError::Checkpoint("not a CVAE checkpoint".into()));
        }
        let field = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| DnrError::Checkpoint(format!("CVAE checkpoint lacks {k}")))
        };
        Ok(CvaeModel {
            encoder: ckpt.model("encoder")?.clone(),
            decoder: ckpt.model("decoder")?.clone(),
            state_dim: field("state_dim")?,
            latent: field("latent")?,
            m: field("m")?,
        })
    }
}

/// ln(max(p, 1e-8)).
pub fn floored_log(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Minibatch Adam on the negative ELBO; returns the model and per-step losses.
pub fn train_cvae<R: Rng + ?Sized>(samples: &[CvaeSample], hp: &CvaeHyper, rng: &mut R) -> Result<(CvaeModel, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| DnrError::Validation("cannot train a CVAE on an empty dataset".into()))?;
    let mut model = CvaeModel::new(first.s.len(), first.mask.m(), hp, rng);
    let mut enc_opt = AdamState::new(&model.encoder, hp.learning_rate);
    let mut dec_opt = AdamState::new(&model.decoder, hp.learning_rate);
    let mut curve = Vec::with_capacity(hp.steps);
    for step in 0..hp.steps {
        let batch: Vec<CvaeSample> = (0..hp.batch.min(samples.len()).max(1))
            .map(|_| samples[rng.random_range(0..samples.len())])
            .collect();
        let (loss, grads) = model.loss_and_grads(&batch, rng).map_err(|e| match e {
            DnrError::NonFinite(m) => DnrError::NonFinite(format!("CVAE diverged at step {step}: {m}")),
            other => other,
        })?;
        enc_opt.step(&mut model.encoder, &grads[0])?;
        dec_opt.step(&mut model.decoder, &grads[1])?;
        curve.push(loss.loss);
    }
    Ok((model, curve))
}

/// ½ Σ |p - q|.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean TV distance between the model's marginal and a reference
/// distribution per state.
pub fn avg_tv_distance<R: Rng + ?Sized>(
    model: &CvaeModel,
    states: &[(&[f64], &SwitchPairMask, Vec<f64>)],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if states.is_empty() {
        return Err(DnrError::Validation("no states to compare".into()));
    }
    let mut total = 0.0;
    for (s, mask, reference) in states {
        let g = model.behavior_distribution(s, mask, samples, rng)?;
        total += tv_distance(reference, &g);
    }
    Ok(total / states.len() as f64)
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cvae::CvaeHyper;
use crate::{DnrError, Result};

/// Settings of the actor-critic learners (BCSAC and SAC).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentHyper {
    pub temperature: f64,
    pub learning_rate: f64,
    pub hidden_units: usize,
    /// Polyak factor of the target value network.
    pub rho: f64,
    pub minibatch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DqnHyper {
    pub learning_rate: f64,
    pub hidden_units: usize,
    pub copy_steps: usize,
    pub minibatch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvaeRow {
    pub learning_rate: f64,
    pub hidden_units: usize,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedHyper {
    pub discount: f64,
    pub hidden_layers: usize,
    pub reward_scale: f64,
    pub training_steps: usize,
    /// Checkpoint interval in training steps.
    pub checkpoint_every: usize,
}

/// Hyperparameter file, one block per learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperTable {
    pub dqn: DqnHyper,
    pub sac: AgentHyper,
    pub bcsac: AgentHyper,
    pub cvae: CvaeRow,
    pub shared: SharedHyper,
}

impl HyperTable {
    /// Published settings for the 16/33/70/119-bus feeders.
    pub fn preset(feeder: &str) -> Result<HyperTable> {
        let k = match feeder {
            "16bus" => 0,
            "33bus" => 1,
            "70bus" => 2,
            "119bus" => 3,
            other => return Err(DnrError::Config(format!("no hyperparameter preset for feeder {other:?}"))),
        };
        let pick = |v: [f64; 4]| v[k];
        let picku = |v: [usize; 4]| v[k];
        Ok(HyperTable {
            dqn: DqnHyper {
                learning_rate: 1e-4,
                hidden_units: picku([200, 200, 250, 250]),
                copy_steps: 30,
                minibatch: picku([32, 64, 64, 64]),
            },
            sac: AgentHyper {
                temperature: pick([0.002, 0.001, 0.0005, 0.0005]),
                learning_rate: pick([5e-4, 1e-4, 1e-4, 1e-4]),
                hidden_units: picku([100, 200, 200, 250]),
                rho: 0.99,
                minibatch: picku([32, 64, 64, 64]),
            },
            bcsac: AgentHyper {
                temperature: pick([0.1, 10.0, 25.0, 50.0]),
                learning_rate: pick([1e-4, 1e-4, 5e-5, 5e-5]),
                hidden_units: picku([100, 100, 200, 250]),
                rho: 0.995,
                minibatch: picku([32, 32, 64, 64]),
            },
            cvae: CvaeRow {
                learning_rate: 1e-4,
                hidden_units: 1400,
                latent_dim: picku([20, 40, 60, 70]),
            },
            shared: SharedHyper {
                discount: 0.95,
                hidden_layers: 2,
                reward_scale: 500.0,
                training_steps: 6000,
                checkpoint_every: 500,
            },
        })
    }

    pub fn load(path: &Path) -> Result<HyperTable> {
        let hp: HyperTable = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.shared;
        if !(0.0..1.0).contains(&s.discount) || s.hidden_layers == 0 || s.training_steps == 0 {
            return Err(DnrError::Config("discount must lie in [0, 1) and layer/step counts be positive".into()));
        }
        for (name, a) in [("sac", &self.sac), ("bcsac", &self.bcsac)] {
            if !(a.temperature > 0.0) || !(a.rho > 0.0 && a.rho < 1.0) || a.minibatch == 0 || a.hidden_units == 0 || !(a.learning_rate > 0.0) {
                return Err(DnrError::Config(format!("{name}: temperature > 0, rho in (0, 1), positive sizes and rate required")));
            }
        }
        if self.dqn.copy_steps == 0 || self.dqn.minibatch == 0 || self.dqn.hidden_units == 0 {
            return Err(DnrError::Config("dqn: positive copy steps, minibatch and width required".into()));
        }
        Ok(())
    }

    pub fn cvae_hyper(&self, batch: usize, steps: usize, samples: usize) -> CvaeHyper {
        CvaeHyper {
            learning_rate: self.cvae.learning_rate,
            hidden: self.cvae.hidden_units,
            hidden_layers: self.shared.hidden_layers,
            latent: self.cvae.latent_dim,
            batch,
            steps,
            samples,
        }
    }
}

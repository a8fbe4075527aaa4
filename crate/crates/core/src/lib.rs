//! Batch-constrained soft actor-critic for dynamic distribution network
//! reconfiguration.
//!
//! The crate covers the full offline pipeline: radial feeder simulation
//! ([`grid`], [`topology`], [`env`]), synthetic historical data
//! ([`behavior_data`]), a small feedforward substrate ([`nn`]), the CVAE
//! behavior model ([`cvae`]), the BCSAC/SAC/DQN learners ([`agents`]), an
//! exact tabular solver for the regularized policy-iteration operators
//! ([`tabular`]) and experiment orchestration ([`harness`]).

pub mod agents;
pub mod behavior_data;
pub mod cvae;
pub mod env;
pub mod error;
pub mod grid;
pub mod harness;
pub mod nn;
pub mod tabular;
pub mod topology;

pub use error::{DnrError, Result};

/// Independent ChaCha8 stream `stream` of `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

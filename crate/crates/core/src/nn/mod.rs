//! Feedforward networks with explicit reverse-mode gradients.
//!
//! Everything here is f64 and deterministic given the caller's RNG.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod softmax;

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{finite_diff_check, GradCheckReport, ParamVector};
pub use mlp::{Dense, Mlp, MlpTape};
pub use softmax::{masked_log_softmax, masked_softmax, masked_softmax_at, sample_index};

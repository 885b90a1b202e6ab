//! Minimal CPU neural-network toolkit: a named parameter store, layers with
//! explicit forward/backward passes, losses, AdamW, schedules and
//! safetensors checkpoints.
//!
//! Layers do not record a graph. Each `forward` returns whatever its
//! `backward` needs, and `backward` accumulates parameter gradients into the
//! store and returns the gradient with respect to the input.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod param;
pub mod schedule;

pub use checkpoint::{Checkpoint, CheckpointError, LoadReport};
pub use optim::{clip_grad_norm, AdamW, GroupConfig};
pub use param::{Init, Param, ParamId, ParamStore};
pub use schedule::{cosine_ramp, Schedule};

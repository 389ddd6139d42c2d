//! Policy network mapping grids to per-switch closing logits.
//!
//! Each hyper-edge class (generator, load, switch, line) gets its own
//! feature encoder. Addresses carry latent vectors that start at zero
//! and evolve through an explicit Euler integration of learned
//! dynamics: at every step each edge sends one message per port into
//! its attached addresses, the per-address sums are squashed through
//! tanh, and a single-layer dynamics function turns (latent, squashed
//! messages) into a latent velocity. After one unit of artificial time
//! a decoder reads each switch's encoding together with its two
//! endpoint latents and emits the logit.
//!
//! Differentiation is record-and-replay through the unrolled
//! integration: the forward pass keeps a tape of every perceptron call
//! and the backward pass walks it in reverse. The optimizer is Adam
//! with element-wise gradient clipping applied before the moment
//! updates.

pub mod adam;
pub mod mlp;
pub mod model;

pub use adam::{adam_step, AdamState};
pub use mlp::{Mlp, MlpGrads, MlpSpec, MlpTrace, LEAKY_SLOPE};
pub use model::{
    Checkpoint, EdgeClass, GridInput, H2mgNodeModel, ModelConfig, ModelGrads, Tape,
    CHECKPOINT_SCHEMA,
};

#[derive(Debug, thiserror::Error)]
pub enum GnnError {
    #[error("expected {expected} parameters, got {got}")]
    ParamLength { expected: usize, got: usize },
    #[error("gradient component {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("checkpoint declares schema {0:?}, expected {CHECKPOINT_SCHEMA:?}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
}

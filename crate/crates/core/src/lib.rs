//! Desk-scale laboratory for reward-guided latent consistency distillation.
//!
//! The crate trains a toy latent diffusion teacher, distills 1-4 step
//! consistency models from it, steers distillation with reward feedback
//! either directly or through a latent proxy reward model, and measures the
//! resulting quality/reward/over-optimization trade-offs. Everything runs in
//! 64-bit floats on a hand-rolled reverse-mode autodiff engine, with one
//! portable seeded RNG stream per run so results are bit-reproducible.

pub mod autodiff;
pub mod checkpoint;
pub mod cm;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod lrm;
pub mod mlp;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod teacher;
pub mod tensor;

pub use autodiff::{
    adam_step, backward, eval_with_grads, forward_eval, grad_check, AdamParams, AdamState, Graph,
    NodeId, ParamSet,
};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
pub mod train;

//! Self-contained numerical core: dense row-major tensors, a tape-based
//! reverse-mode autodiff engine, the AdamW optimizer, a central-difference
//! gradient checker and a bit-exact binary checkpoint format.
//!
//! Everything is generic over [`Scalar`] so that training can run in `f32`
//! while gradient checks replay the same graph in `f64`.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod rng;
mod scalar;
pub mod tape;
mod tensor;

pub use checkpoint::{checksum_tensors, ParamStore};
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, grad_check_many, grad_check_sampled, operator_suite, GradCheckReport, OperatorCheck};
pub use optim::{adamw_step, AdamW, AdamWConfig, OptimizerState, ParamGroup};
pub use rng::SplitMix64;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

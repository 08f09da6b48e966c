//! Streaming model-merging engine.
//!
//! paramerge merges collections of fine-tuned checkpoints ("constituents")
//! that share an architecture and a base initialization into a single set of
//! parameters. Eight methods are provided — element-wise averaging, spherical
//! interpolation (SLERP, with MLERP for more than two models), task
//! arithmetic, DARE, TIES, Fisher-weighted averaging, RegMean least-squares
//! merging, and MaTS (the same normal equations solved by conjugate
//! gradient) — together with:
//!
//! - a single-file checkpoint container with per-block streaming access, so a
//!   merge never holds more than one parameter block per constituent in
//!   memory;
//! - computation of the auxiliary statistics some methods need (diagonal
//!   Fisher, per-layer Gram matrices, trimmed task vectors);
//! - an analytic per-layer FLOPs cost model plus a wall-clock timing harness;
//! - a synthetic compositional-generalization benchmark with hyperparameter
//!   sweeps and a nested task-sampling scaling protocol.
//!
//! Merge arithmetic is generic over the element type via [`Scalar`]; the
//! container format stores `f32`, so the engine works with the [`Tensor32`]
//! and [`TensorMap32`] aliases everywhere data touches disk.

pub mod bench;
pub mod container;
pub mod cost;
pub mod error;
pub mod merge;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorMap};

/// Element type stored in checkpoint containers.
pub type Elem = f32;
/// Tensor as stored in checkpoint containers.
pub type Tensor32 = Tensor<f32>;
/// Checkpoint contents: named tensors, iterated in lexicographic name order.
pub type TensorMap32 = TensorMap<f32>;

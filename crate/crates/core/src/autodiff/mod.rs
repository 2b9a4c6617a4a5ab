//! Reverse-mode differentiation over `f64` vectors and matrices.
//!
//! A [`Tape`] borrows a [`ParameterSet`], records every forward op with its
//! inputs and replays them backwards into a [`Gradients`] value. The caller
//! folds gradients into the parameter buffers with
//! [`ParameterSet::accumulate`] and applies them with an
//! [`OptimizerState`]. Keeping the tape immutable during backward lets
//! several tapes over the same parameters run concurrently.

mod container;
mod optim;
mod tape;
mod tensor;

pub use container::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use optim::{Algorithm, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_CLIP};
pub use tape::{log_sum_exp, softmax, Gradients, Tape, Var};
pub use tensor::{ParamId, ParameterSet, Tensor};

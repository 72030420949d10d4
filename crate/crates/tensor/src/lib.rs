//! Minimal dense-tensor engine with a reverse-mode tape.
//!
//! Everything learnable in the splatting pipeline lives in a [`ParamStore`]:
//! per-point feature rows, hash-grid tables and the weights of small MLPs.
//! A forward pass registers those parameters on a [`Tape`], records each
//! operation, and [`Tape::backward`] replays the record in reverse to produce
//! a [`Gradients`] map that [`Adam`] consumes.
//!
//! The engine is deliberately 2-D centric: tensors are `rows x cols` matrices
//! (scalars are `1 x 1`), which is all the pipeline needs.

mod error;
mod mlp;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::TensorError;
pub use mlp::{Activation, Linear, Mlp};
pub use optim::{Adam, AdamConfig, Moments};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, SparseGatherPlan, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

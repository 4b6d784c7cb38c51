//! Minimal deterministic numeric core.
//!
//! Everything runs in `f64` on a single thread. Reverse-mode gradients come
//! from [`Graph`], a tape that records a fixed set of primitives while the
//! forward pass runs and replays them backwards. Trainable tensors live in a
//! [`ParamStore`]; a graph borrows the store and writes parameter gradients
//! into a separate [`Grads`] table so that several graphs (one per window of a
//! batch) can accumulate into the same table.

mod adam;
mod fd;
mod graph;
pub mod linalg;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use fd::{finite_diff_grad, DEFAULT_FD_STEP};
pub use graph::{cosine_distance, Graph, Var};
pub use params::{Grads, Param, ParamStore};
pub use rng::{RngState, RngStream};
pub use tensor::Tensor;

//! Multivariate time-series anomaly detection by dual-branch reconstruction
//! and autoregressive-flow density estimation of reconstruction residuals.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: tensors, a tape-based reverse-mode autodiff graph, seeded
//!   random streams, finite differences and Adam.
//! - [`data`]: CSV ingestion, normalisation, windowing, chronological
//!   train/validation split and a synthetic generator with labelled anomalies.
//! - [`dbr`]: the temporal self-attention branch, the channel cross-attention
//!   branch with its memory bank, the reconstruction loss and the
//!   gradient-severed residual.
//! - [`flow`]: MADE-masked affine autoregressive layers, coupling layers,
//!   the Gaussian-mixture prior and the exact log-likelihood.
//! - [`train`]: loss composition, the optimisation loop with early stopping,
//!   ablation switches and checkpoints.
//! - [`evalkit`]: anomaly scores, thresholding, point-adjust and metrics.

pub mod data;
pub mod dbr;
pub mod error;
pub mod evalkit;
pub mod flow;
pub mod model;
pub mod numkit;
pub mod train;

pub use error::{Error, Result};

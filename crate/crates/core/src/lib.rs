//! Golden-subspace continual test-time adaptation at desk scale.
//!
//! A frozen source model (affine backbone + linear classifier) serves a
//! non-stationary, unlabeled test stream. Adaptation happens through a
//! residual low-rank adapter whose basis tracks the top eigenvectors of an
//! online average-gradient-outer-product (AGOP) estimate, plus a compact
//! scaling vector and the backbone's affine pair, updated one gradient step
//! per batch from a self-training and a prototype-contrastive loss.
//!
//! Module map:
//! - [`linalg`]: dense kernels (Jacobi eigensolver, one-sided Jacobi SVD,
//!   pseudoinverse), least-norm corrections, subspace metrics.
//! - [`model`]: source pretraining, frozen backbone/head, prototypes, the
//!   EMA teacher, checkpoint i/o.
//! - [`adapter`]: the residual scaled-projection feature adapter.
//! - [`agop`]: confidence-filtered AGOP estimation and basis refresh.
//! - [`losses`]: loss terms, exact analytic gradients, one-step optimizers.
//! - [`stream`]: synthetic domain-shift streams and feature CSV ingestion.
//! - [`config`]: the key=value experiment config format.
//! - [`engine`]: the predict-then-adapt orchestration loop and metrics.
//! - [`container`]: bit-exact binary containers for checkpoints and
//!   AGOP snapshots.

pub mod adapter;
pub mod agop;
pub mod config;
pub mod container;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod stream;

pub use error::{Error, Result};

//! Adversarial-robustness pipeline for CNN-based spacecraft relative pose
//! estimation.
//!
//! The crate covers six stages that chain into one experiment loop:
//!
//! 1. [`scenegen`] renders a procedural satellite mock-up along parametric
//!    approach trajectories and persists labeled datasets.
//! 2. [`estimator`] trains a convolutional regressor that maps a single
//!    camera frame to relative position and a 6-D attitude encoding.
//! 3. [`attacks`] perturbs frames with the fast gradient sign method and
//!    schedules attack bursts along trajectories.
//! 4. [`explain`] attributes the nine regression outputs to the pooling
//!    bottleneck features, producing per-frame signatures.
//! 5. [`detector`] classifies those signatures with a small LSTM to flag
//!    attacked frames.
//! 6. [`rendezvous`] closes the loop: guidance toward a target position,
//!    driven by the estimator, with attacks and detection in the loop.
//!
//! Everything is built on [`numerics`], a reverse-mode autodiff tape, and
//! [`geometry`], the rotation and camera arithmetic. All stochastic steps
//! draw from seeded streams ([`rng`]), so every artifact is reproducible
//! bit for bit. Batch work parallelizes through [`parallel`], which falls
//! back to sequential execution when the `parallel` feature is disabled.

pub mod attacks;
mod bytes;
pub mod detector;
pub mod error;
pub mod estimator;
pub mod explain;
pub mod geometry;
pub mod numerics;
pub mod parallel;
pub mod rendezvous;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
pub use numerics::{Real, Tape, Tensor, Var};

/// Crate version, embedded in artifact manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

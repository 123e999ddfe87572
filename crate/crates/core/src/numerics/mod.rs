//! Reverse-mode automatic differentiation and the layer primitives used by
//! the pose estimator and the attack detector.
//!
//! The engine is a linear tape: every operation eagerly computes its value
//! and appends one node recording the operation and its inputs. Nodes are
//! addressed by [`Var`] handles, inputs always precede their consumers, and
//! [`Tape::backward`] performs a single reverse sweep from a scalar loss,
//! returning gradients for every node marked `requires_grad`.
//!
//! Layer primitives (convolution, batch norm, activations, pooling, linear
//! maps, dropout, an LSTM step) are tape operations with exact adjoints.
//! [`gradcheck`] provides the central-difference probes the test suites use
//! to verify every adjoint against an independent numeric oracle.

pub mod gradcheck;
mod lstm;
mod tape;
mod tensor;

pub use lstm::{lstm_step, LstmVars};
pub use tape::{
    input_gradient, BatchNormState, Gradients, Tape, Var, BN_EPS, BN_MOMENTUM,
};
pub use tensor::{Real, Tensor};

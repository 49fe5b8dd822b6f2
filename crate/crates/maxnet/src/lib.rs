//! A from-scratch training engine for multilayer perceptrons built around a
//! grouped-max activation: each hidden layer applies an affine map to produce
//! presynaptic units and then takes the maximum over non-overlapping groups
//! of `k` consecutive units, so the layer learns a piecewise-linear response
//! while exposing `1/k` as many activations downstream.
//!
//! The crate covers the full training loop: a minimal dense matrix type
//! ([`tensor`]), the layer forward/backward math ([`layers`], [`network`]),
//! minibatch SGD with momentum and a per-column max-norm constraint
//! ([`optim`]), IDX data loading plus synthetic datasets ([`data`]), binary
//! checkpoints ([`checkpoint`]), a two-phase early-stopping protocol
//! ([`protocol`]), and a finite-difference gradient checker ([`gradcheck`]).
//!
//! Determinism is a design goal: all randomness flows through seeded ChaCha8
//! streams ([`seeding`]), floating-point reductions run serially in a fixed
//! order, and identical seeds plus identical configs give bitwise-identical
//! parameter trajectories.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod protocol;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Scalar};

#![no_std]
//! Numerical core for exact power-series analysis of smooth feedforward
//! networks.
//!
//! A gradient-descent step `W_O → W_O + W_Δ` of a tanh network changes its
//! output by exactly `⟨Φ_O(x), Ψ_O(W_Δ)⟩`, the pairing of a data feature map
//! and a weight-step feature map built from Taylor expansions of every neuron
//! about its pre-activation. This crate computes:
//!
//! * [`net`]: the network, its empirical risk and the back-propagation step;
//! * [`series`]: the scalar helpers `θ`, `κ`, `σ`, `σ̄` and tanh Taylor
//!   coefficients about arbitrary centres;
//! * [`features`]: explicit truncated feature maps and their pairing;
//! * [`geometry`]: the induced kernels and norms and all of their gradients;
//! * [`canonical`]: convergence checkers and the canonical scaling under which
//!   the step is a regularised minimiser;
//! * [`complexity`]: Rademacher-complexity bounds for one or many steps.
//!
//! The crate is `no_std` and only needs `alloc`.

extern crate alloc;

pub mod canonical;
pub mod complexity;
pub mod error;
pub mod features;
pub mod geometry;
pub mod linalg;
pub mod net;
mod scalar;
pub mod series;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use net::{Activation, NetworkSpec, TrainingSet, WeightState, WeightStep, Weights};
pub use series::TruncationPolicy;

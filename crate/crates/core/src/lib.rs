//! Training-dynamics laboratory for deep linear networks and mask-linearized
//! ReLU networks.
//!
//! The crate simulates full-batch gradient descent (forward-Euler gradient
//! flow) and measures the quantities that stay conserved or bounded along the
//! way: adjacent-layer balancedness `W_{l+1}ᵀW_{l+1} − W_l W_lᵀ`, layer-norm
//! gaps, per-mode strengths in a data-aligned basis, and the depth-dependent
//! growth bound on the combined strength `U = (|W_1|_F + Δ)^L`.
//!
//! Layer indices are 0-based throughout: `weights[0]` acts on the input.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod init;
pub mod linalg;
pub mod lnn;
pub mod relu;
pub mod trajectory;

pub use error::{Error, Result};
pub use linalg::Matrix;

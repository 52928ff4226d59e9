//! Off-policy evaluation with primal-dual spectral representations.
//!
//! The pipeline learns a low-rank factorization of the target-policy
//! state-action kernel from behavior data ([`replearn`]), then solves a
//! regularized convex-concave saddle point in the learned feature spaces to
//! estimate the target policy's normalized value ([`dice`]). Everything runs on
//! tabular MDPs ([`mdp`], [`envs`]) so that exact oracles are available for
//! every quantity.

pub mod baselines;
pub mod dice;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod persist;
pub mod replearn;

pub use error::{Error, Result};

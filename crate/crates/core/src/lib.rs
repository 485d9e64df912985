//! Numerical laboratory for constant-stepsize stochastic approximation driven
//! by decision-dependent (controlled) Markov noise.
//!
//! The crate is organised around the objects of the recursion
//! `theta_{k+1} = theta_k + alpha * (g(theta_k, X_{k+1}) + xi_{k+1})`,
//! `X_{k+1} ~ P_theta_k(X_k, .)`:
//!
//! - [`kernels`]: controlled kernel families `P_theta` and their diagnostics.
//! - [`mean_field`]: update maps `g`, the mean field, its root and Jacobian.
//! - [`engine`]: the SA recursion, moment accumulators and coupled pairs.
//! - [`poisson`]: Poisson equation solvers, Gateaux derivative of the kernel
//!   response and the quadratic-remainder scan.
//! - [`estimators`]: scaling fits, Richardson-Romberg, Green-Kubo, CLT
//!   coverage, geometric rates and the bias-term decomposition.

pub mod engine;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod linalg;
pub mod mean_field;
pub mod poisson;
pub mod rng;

pub use error::{Error, Result};

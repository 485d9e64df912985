//! Decision-dependent Markov kernel families `P_theta`.
//!
//! All kernels are immutable after construction and take their randomness as
//! explicit [`Draws`], so two chains fed the same draws are synchronously
//! coupled.

mod clipped;
mod diagnostics;
mod finite;
mod langevin;
mod mh;

pub use clipped::ClippedArKernel;
pub use diagnostics::{estimate_contraction, estimate_sensitivity, KernelDiagnostics};
pub use finite::{
    stationary_distribution, transition_matrix, FiniteFamily, FiniteKernel, MatrixFamily,
    StateMetric, TwoStateFamily,
};
pub use langevin::{BoxSet, ProjectedLangevinKernel};
pub use mh::MhKernel;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{DrawSpec, Draws};

/// A parametric Markov kernel `theta -> P_theta` on a metric state space.
pub trait ControlledKernel: Send + Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;

    /// Draws consumed per transition. Fixed so coupled chains stay aligned.
    fn draw_spec(&self) -> DrawSpec;

    /// One transition `x -> x'` under `P_theta`, deterministic given the draws.
    fn sample_next(&self, theta: &[f64], x: &Self::State, draws: Draws<'_>) -> Result<Self::State>;

    /// State metric `d_X`.
    fn distance(&self, a: &Self::State, b: &Self::State) -> f64;

    /// Default starting point for chains.
    fn initial_state(&self) -> Self::State;

    /// A state drawn over the whole space, used by diagnostics.
    fn random_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    /// Enumerates the states of a finite space.
    fn states(&self) -> Option<Vec<Self::State>> {
        None
    }

    /// Exact transition matrix, for finite kernels.
    fn transition_matrix(&self, _theta: &[f64]) -> Option<Result<DMatrix<f64>>> {
        None
    }

    /// Index of a state in [`ControlledKernel::states`].
    fn state_index(&self, _x: &Self::State) -> Option<usize> {
        None
    }

    /// Largest pairwise distance over the state space (empirical for continuous spaces).
    fn diameter(&self) -> f64;
}

/// Scalar response `s -> r(s)` of a kernel parameter to the decision variable,
/// evaluated on the projection `s = <w, theta>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Response {
    Constant { value: f64 },
    Linear { base: f64, slope: f64 },
    /// `base + slope * tanh((s - center) / scale)`
    Tanh { base: f64, slope: f64, scale: f64, center: f64 },
    /// `base + slope * |s - center|`; not differentiable at `center`.
    Kink { base: f64, slope: f64, center: f64 },
}

impl Response {
    pub fn tanh(base: f64, slope: f64) -> Self {
        Response::Tanh { base, slope, scale: 1.0, center: 0.0 }
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Response::Constant { value } => value,
            Response::Linear { base, slope } => base + slope * s,
            Response::Tanh { base, slope, scale, center } => base + slope * ((s - center) / scale).tanh(),
            Response::Kink { base, slope, center } => base + slope * (s - center).abs(),
        }
    }

    pub fn is_constant(&self) -> bool {
        match *self {
            Response::Constant { .. } => true,
            Response::Linear { slope, .. }
            | Response::Tanh { slope, .. }
            | Response::Kink { slope, .. } => slope == 0.0,
        }
    }
}

/// Projection `<w, theta>`; an empty weight vector means `theta[0]`.
#[inline]
pub(crate) fn project(weights: &[f64], theta: &[f64]) -> f64 {
    if weights.is_empty() {
        theta[0]
    } else {
        weights.iter().zip(theta).map(|(w, t)| w * t).sum()
    }
}

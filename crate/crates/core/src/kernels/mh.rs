//! Random-walk Metropolis–Hastings kernel targeting `exp(-U(x; theta))`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{project, ControlledKernel, Response};
use crate::error::{check_finite, Error, Result};
use crate::linalg::dist_sq;
use crate::rng::{DrawSpec, Draws};

type Potential = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// Proposal `y = x + sigma_q z`; accept with probability `min(1, exp(U(x) - U(y)))`.
///
/// Every step consumes one uniform and `dim` gaussians whether or not the
/// proposal is accepted, so coupled chains stay aligned.
#[derive(Clone)]
pub struct MhKernel {
    dim: usize,
    proposal_scale: f64,
    potential: Arc<Potential>,
    probe_radius: f64,
}

impl fmt::Debug for MhKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MhKernel")
            .field("dim", &self.dim)
            .field("proposal_scale", &self.proposal_scale)
            .finish_non_exhaustive()
    }
}

impl MhKernel {
    /// `potential(x, theta)` returns `U(x; theta)`.
    pub fn new(
        dim: usize,
        proposal_scale: f64,
        potential: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "state dimension must be positive"));
        }
        if !(proposal_scale > 0.0 && proposal_scale.is_finite()) {
            return Err(Error::config(
                "proposal_scale",
                format!("proposal scale must be positive, got {proposal_scale}"),
            ));
        }
        Ok(MhKernel { dim, proposal_scale, potential: Arc::new(potential), probe_radius: 5.0 })
    }

    /// Gaussian target `N(c(<w, theta>), s^2 I)`.
    pub fn gaussian(dim: usize, proposal_scale: f64, center: Response, scale: f64, weights: Vec<f64>) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::config("target_scale", format!("must be positive, got {scale}")));
        }
        let mut k = Self::new(dim, proposal_scale, move |x, theta| {
            let c = center.eval(project(&weights, theta));
            x.iter().map(|v| (v - c) * (v - c)).sum::<f64>() / (2.0 * scale * scale)
        })?;
        k.probe_radius = 5.0 * scale;
        Ok(k)
    }

    /// Half-width of the box used for diagnostic start states.
    pub fn with_probe_radius(mut self, r: f64) -> Self {
        self.probe_radius = r;
        self
    }

    pub fn potential(&self, x: &[f64], theta: &[f64]) -> f64 {
        (self.potential)(x, theta)
    }

    /// `min(1, exp(U(x) - U(y)))`.
    pub fn acceptance(&self, theta: &[f64], x: &[f64], y: &[f64]) -> f64 {
        let log_r = self.potential(x, theta) - self.potential(y, theta);
        if log_r.is_nan() {
            0.0
        } else {
            log_r.min(0.0).exp()
        }
    }
}

impl ControlledKernel for MhKernel {
    type State = Vec<f64>;

    fn draw_spec(&self) -> DrawSpec {
        DrawSpec { uniforms: 1, gaussians: self.dim }
    }

    fn sample_next(&self, theta: &[f64], x: &Vec<f64>, draws: Draws<'_>) -> Result<Vec<f64>> {
        check_finite("theta", theta)?;
        let y: Vec<f64> = x
            .iter()
            .zip(draws.gaussians)
            .map(|(xi, z)| xi + self.proposal_scale * z)
            .collect();
        if draws.uniforms[0] < self.acceptance(theta, x, &y) {
            Ok(y)
        } else {
            Ok(x.clone())
        }
    }

    fn distance(&self, a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        dist_sq(a, b).sqrt()
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn random_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim)
            .map(|_| self.probe_radius * rng.sample::<f64, _>(StandardNormal).clamp(-1.0, 1.0))
            .collect()
    }

    /// The space is unbounded; this is the diameter of the diagnostic probe box.
    fn diameter(&self) -> f64 {
        2.0 * self.probe_radius * (self.dim as f64).sqrt()
    }
}

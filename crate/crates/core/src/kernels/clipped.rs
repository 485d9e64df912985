//! Clipped autoregressive kernel `x' = clip(rho x + m(theta) + sigma(theta) z, -C, C)`.

use rand::Rng;

use super::{project, ControlledKernel, Response};
use crate::error::{check_finite, Error, Result};
use crate::rng::{DrawSpec, Draws};

#[derive(Debug, Clone, PartialEq)]
pub struct ClippedArKernel {
    rho: f64,
    drift: Response,
    sigma: Response,
    clip: f64,
    weights: Vec<f64>,
}

impl ClippedArKernel {
    pub fn new(rho: f64, drift: Response, sigma: Response, clip: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::config("rho", format!("|rho| must be < 1, got {rho}")));
        }
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(Error::config("clip", format!("clip bound must be positive, got {clip}")));
        }
        Ok(ClippedArKernel { rho, drift, sigma, clip, weights: Vec::new() })
    }

    /// Projection weights for `s = <w, theta>`; empty means `theta[0]`.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = weights;
        self
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip
    }

    /// Noiseless part of the transition, before clipping.
    pub fn mean_step(&self, theta: &[f64], x: f64) -> f64 {
        self.rho * x + self.drift.eval(project(&self.weights, theta))
    }

    pub fn sigma_at(&self, theta: &[f64]) -> Result<f64> {
        let s = self.sigma.eval(project(&self.weights, theta));
        if !(s >= 0.0) {
            return Err(Error::config("sigma", format!("noise scale must be non-negative, got {s}")));
        }
        Ok(s)
    }
}

impl ControlledKernel for ClippedArKernel {
    type State = f64;

    fn draw_spec(&self) -> DrawSpec {
        DrawSpec { uniforms: 0, gaussians: 1 }
    }

    #[inline]
    fn sample_next(&self, theta: &[f64], x: &f64, draws: Draws<'_>) -> Result<f64> {
        check_finite("theta", theta)?;
        let sigma = self.sigma_at(theta)?;
        let pre = self.mean_step(theta, *x) + sigma * draws.gaussians[0];
        Ok(pre.clamp(-self.clip, self.clip))
    }

    fn distance(&self, a: &f64, b: &f64) -> f64 {
        (a - b).abs()
    }

    fn initial_state(&self) -> f64 {
        0.0
    }

    fn random_state<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(-self.clip..=self.clip)
    }

    fn diameter(&self) -> f64 {
        2.0 * self.clip
    }
}

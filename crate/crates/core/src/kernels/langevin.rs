//! Projected Langevin kernel on an axis-aligned box.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use super::{project, ControlledKernel, Response};
use crate::error::{check_finite, Error, Result};
use crate::linalg::{dist_sq, norm};
use crate::rng::{DrawSpec, Draws};

/// `K = prod [lo_i, hi_i]`; projection is componentwise clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::config("box", "lower and upper bounds must be non-empty and equally long"));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l < h) || !l.is_finite() || !h.is_finite() {
                return Err(Error::config(format!("box[{i}]"), format!("need finite lo < hi, got [{l}, {h}]")));
            }
        }
        Ok(BoxSet { lo, hi })
    }

    pub fn cube(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    #[inline]
    pub fn project_in_place(&self, x: &mut [f64]) {
        for ((v, l), h) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| *v >= *l && *v <= *h)
    }

    pub fn diameter(&self) -> f64 {
        let w: Vec<f64> = self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect();
        norm(&w)
    }
}

type Gradient = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// `x' = Pi_K(x - eta grad U_theta(x) + sqrt(2 eta) z)`.
#[derive(Clone)]
pub struct ProjectedLangevinKernel {
    eta: f64,
    grad: Arc<Gradient>,
    domain: BoxSet,
}

impl fmt::Debug for ProjectedLangevinKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProjectedLangevinKernel")
            .field("eta", &self.eta)
            .field("domain", &self.domain)
            .finish_non_exhaustive()
    }
}

impl ProjectedLangevinKernel {
    /// `grad(theta, x, out)` writes `grad_x U_theta(x)`.
    pub fn new(
        eta: f64,
        domain: BoxSet,
        grad: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::config("eta", format!("step size must be positive, got {eta}")));
        }
        Ok(ProjectedLangevinKernel { eta, grad: Arc::new(grad), domain })
    }

    /// Quadratic potential `U = 1/2 sum_i k_i (x_i - c_i(<w, theta>))^2`.
    pub fn quadratic(
        eta: f64,
        domain: BoxSet,
        stiffness: Vec<f64>,
        centers: Vec<Response>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let d = domain.dim();
        if stiffness.len() != d || centers.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: stiffness.len().min(centers.len()) });
        }
        Self::new(eta, domain, move |theta, x, out| {
            let s = project(&weights, theta);
            for i in 0..x.len() {
                out[i] = stiffness[i] * (x[i] - centers[i].eval(s));
            }
        })
    }

    pub fn domain(&self) -> &BoxSet {
        &self.domain
    }
}

impl ControlledKernel for ProjectedLangevinKernel {
    type State = Vec<f64>;

    fn draw_spec(&self) -> DrawSpec {
        DrawSpec { uniforms: 0, gaussians: self.domain.dim() }
    }

    fn sample_next(&self, theta: &[f64], x: &Vec<f64>, draws: Draws<'_>) -> Result<Vec<f64>> {
        check_finite("theta", theta)?;
        let mut g = vec![0.0; x.len()];
        (self.grad)(theta, x, &mut g);
        let scale = (2.0 * self.eta).sqrt();
        let mut next: Vec<f64> = x
            .iter()
            .zip(&g)
            .zip(draws.gaussians)
            .map(|((xi, gi), z)| xi - self.eta * gi + scale * z)
            .collect();
        self.domain.project_in_place(&mut next);
        Ok(next)
    }

    fn distance(&self, a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        dist_sq(a, b).sqrt()
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.domain.dim()];
        self.domain.project_in_place(&mut x);
        x
    }

    fn random_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.domain.lo.iter().zip(&self.domain.hi).map(|(l, h)| rng.random_range(*l..=*h)).collect()
    }

    fn diameter(&self) -> f64 {
        self.domain.diameter()
    }
}

//! Long-run covariance of `h(theta_k)` and CLT coverage of replica means.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Relative change of the partial sum, across [`PLATEAU_WINDOW`] lags, below
/// which the sum is declared converged.
pub const PLATEAU_TOL: f64 = 1e-3;
pub const PLATEAU_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreenKuboEstimate {
    /// Lag-0 covariance.
    pub variance_term: DMatrix<f64>,
    /// `Cov(h_0, h_k)` for `k = 1..=truncation_lag`.
    pub lag_covariances: Vec<DMatrix<f64>>,
    /// `Var + sum_k (C_k + C_k^T)`.
    pub sigma_h: DMatrix<f64>,
    pub truncation_lag: usize,
    /// True when truncation came from plateau detection rather than `max_lag`.
    pub plateau: bool,
    pub n_samples: usize,
}

/// Green–Kubo estimate from one series stored row-major: `series[t * dim + i]`.
pub fn green_kubo(series: &[f64], dim: usize, max_lag: usize) -> Result<GreenKuboEstimate> {
    green_kubo_pooled(&[series], dim, max_lag)
}

/// Green–Kubo estimate pooling several independent series of the same
/// process: lag covariances are averaged across series around the grand mean.
pub fn green_kubo_pooled(series: &[&[f64]], dim: usize, max_lag: usize) -> Result<GreenKuboEstimate> {
    if dim == 0 {
        return Err(Error::config("dim", "must be positive"));
    }
    if max_lag == 0 {
        return Err(Error::config("max_lag", "must be positive"));
    }
    if series.is_empty() {
        return Err(Error::InsufficientData("no series given".into()));
    }
    for s in series {
        if s.len() % dim != 0 {
            return Err(Error::DimensionMismatch { expected: dim, got: s.len() % dim });
        }
        let n = s.len() / dim;
        if n < 50 * max_lag {
            return Err(Error::InsufficientData(format!(
                "series of length {n} is shorter than 50 * max_lag = {}",
                50 * max_lag
            )));
        }
        crate::error::check_finite("series", s)?;
    }
    let total: usize = series.iter().map(|s| s.len() / dim).sum();
    let mut mean = vec![0.0; dim];
    for s in series {
        for row in s.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let centered: Vec<Vec<f64>> = series
        .iter()
        .map(|s| s.chunks_exact(dim).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m)).collect())
        .collect();

    // Biased (divide by n) estimator: keeps the implied spectral estimate PSD-friendly.
    let lag_cov = |k: usize| -> DMatrix<f64> {
        let mut c = DMatrix::zeros(dim, dim);
        for s in &centered {
            let n = s.len() / dim;
            for t in 0..n - k {
                let a = &s[t * dim..(t + 1) * dim];
                let b = &s[(t + k) * dim..(t + k + 1) * dim];
                for i in 0..dim {
                    for j in 0..dim {
                        c[(i, j)] += a[i] * b[j];
                    }
                }
            }
        }
        c / total as f64
    };

    let variance_term = {
        let c = lag_cov(0);
        (&c + c.transpose()) * 0.5
    };
    let mut sigma = variance_term.clone();
    let mut partial: Vec<DMatrix<f64>> = vec![sigma.clone()];
    let mut lags = Vec::new();
    let mut plateau = false;
    for k in 1..=max_lag {
        let c = lag_cov(k);
        sigma += &c + c.transpose();
        lags.push(c);
        partial.push(sigma.clone());
        if k >= PLATEAU_WINDOW {
            let change = (&sigma - &partial[k - PLATEAU_WINDOW]).amax();
            if change <= PLATEAU_TOL * sigma.amax() {
                plateau = true;
                break;
            }
        }
    }
    let truncation_lag = lags.len();
    Ok(GreenKuboEstimate { variance_term, lag_covariances: lags, sigma_h: sigma, truncation_lag, plateau, n_samples: total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageResult {
    pub coverage: f64,
    pub n_replicas: usize,
    pub nominal: f64,
    /// Chi-square quantile bounding the ellipsoid.
    pub threshold: f64,
}

/// Fraction of replicas with `n (m_r - m)^T Sigma^{-1} (m_r - m)` inside the
/// nominal chi-square quantile, where `m` is the grand mean.
pub fn clt_coverage(replica_means: &[Vec<f64>], n_steps: u64, sigma_h: &DMatrix<f64>, nominal: f64) -> Result<CoverageResult> {
    if replica_means.len() < 200 {
        return Err(Error::InsufficientData(format!("coverage needs at least 200 replicas, got {}", replica_means.len())));
    }
    if !(nominal > 0.0 && nominal < 1.0) {
        return Err(Error::config("nominal", format!("must lie in (0, 1), got {nominal}")));
    }
    let m = sigma_h.nrows();
    if sigma_h.ncols() != m {
        return Err(Error::config("sigma_h", "must be square"));
    }
    if let Some(bad) = replica_means.iter().find(|r| r.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, got: bad.len() });
    }
    let chol = (sigma_h + sigma_h.transpose()).scale(0.5).cholesky().ok_or_else(|| {
        Error::Numerical("sigma_h is singular or indefinite; run longer chains to estimate it".into())
    })?;
    let r = replica_means.len() as f64;
    let grand: Vec<f64> = (0..m).map(|i| replica_means.iter().map(|v| v[i]).sum::<f64>() / r).collect();
    let threshold = ChiSquared::new(m as f64)
        .map_err(|e| Error::Numerical(e.to_string()))?
        .inverse_cdf(nominal);
    let inside = replica_means
        .iter()
        .filter(|v| {
            let z = DVector::from_iterator(m, v.iter().zip(&grand).map(|(a, b)| (a - b) * (n_steps as f64).sqrt()));
            let q = z.dot(&chol.solve(&z));
            q <= threshold
        })
        .count();
    Ok(CoverageResult { coverage: inside as f64 / r, n_replicas: replica_means.len(), nominal, threshold })
}

//! Bias estimates across replicas and weighted log-log exponent fits.

use serde::Serialize;

use crate::engine::MomentAccumulator;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingRow {
    pub alpha: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub n_replicas: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub slope_std_error: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
    pub slope_std_error: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits `log estimate = intercept + slope * log alpha`.
///
/// Weights are `1 / (std_error / estimate)^2` (delta method on the log);
/// when any standard error is zero the fit is unweighted. With weights the
/// slope error treats the standard errors as known; unweighted fits use the
/// residual variance.
pub fn loglog_slope(rows: &[ScalingRow]) -> Result<SlopeFit> {
    if rows.len() < 3 {
        return Err(Error::InsufficientData(format!("need at least 3 step sizes, got {}", rows.len())));
    }
    for r in rows {
        if !(r.estimate > 0.0) {
            return Err(Error::InsufficientData(format!(
                "estimate {} at alpha = {} is not positive; the signal is indistinguishable from zero, use more replicas",
                r.estimate, r.alpha
            )));
        }
        if !(r.alpha > 0.0) {
            return Err(Error::config("alpha", format!("must be positive, got {}", r.alpha)));
        }
    }
    let x: Vec<f64> = rows.iter().map(|r| r.alpha.ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.estimate.ln()).collect();
    let weighted = rows.iter().all(|r| r.std_error > 0.0 && r.std_error.is_finite());
    let w: Vec<f64> = if weighted {
        rows.iter().map(|r| (r.estimate / r.std_error).powi(2)).collect()
    } else {
        vec![1.0; rows.len()]
    };
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let my = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(w, x)| w * (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InsufficientData("step sizes must not all coincide".into()));
    }
    let sxy: f64 = w.iter().zip(x.iter().zip(&y)).map(|(w, (x, y))| w * (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = w.iter().zip(x.iter().zip(&y)).map(|(w, (x, y))| w * (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = w.iter().zip(&y).map(|(w, y)| w * (y - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let slope_std_error = if weighted {
        (1.0 / sxx).sqrt()
    } else {
        (ss_res / (rows.len() as f64 - 2.0) / sxx).sqrt()
    };
    Ok(SlopeFit { slope, slope_std_error, intercept, r_squared })
}

/// Sorts rows by decreasing `alpha` and attaches the fitted slope.
pub fn scaling_report(mut rows: Vec<ScalingRow>) -> Result<ScalingReport> {
    rows.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
    if rows.windows(2).any(|w| w[0].alpha == w[1].alpha) {
        return Err(Error::config("alphas", "step sizes must be distinct"));
    }
    let fit = loglog_slope(&rows)?;
    Ok(ScalingReport {
        rows,
        slope: fit.slope,
        slope_std_error: fit.slope_std_error,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasEstimate {
    /// Mean over replicas of the post-burn-in mean of `Delta`.
    pub bias: Vec<f64>,
    /// Standard error across replicas, per component.
    pub std_error: Vec<f64>,
    pub norm: f64,
    /// Delta-method standard error of `norm`.
    pub norm_std_error: f64,
    pub n_replicas: usize,
}

/// Replica-level bias: every replica contributes one time-averaged `Delta`.
pub fn bias_estimate(replicas: &[MomentAccumulator], theta_star: &[f64]) -> Result<BiasEstimate> {
    if replicas.len() < 2 {
        return Err(Error::InsufficientData("bias needs at least 2 replicas for a standard error".into()));
    }
    let d = theta_star.len();
    let means: Vec<Vec<f64>> = replicas
        .iter()
        .map(|acc| {
            if acc.reference.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: acc.reference.len() });
            }
            Ok(acc.mean_theta()?.iter().zip(theta_star).map(|(m, t)| m - t).collect())
        })
        .collect::<Result<_>>()?;
    let n = means.len() as f64;
    let bias: Vec<f64> = (0..d).map(|i| means.iter().map(|m| m[i]).sum::<f64>() / n).collect();
    let std_error: Vec<f64> = (0..d)
        .map(|i| {
            let var = means.iter().map(|m| (m[i] - bias[i]).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    let norm = bias.iter().map(|b| b * b).sum::<f64>().sqrt();
    let norm_std_error = if norm > 0.0 {
        bias.iter().zip(&std_error).map(|(b, s)| (b / norm * s).powi(2)).sum::<f64>().sqrt()
    } else {
        std_error.iter().map(|s| s * s).sum::<f64>().sqrt()
    };
    Ok(BiasEstimate { bias, std_error, norm, norm_std_error, n_replicas: replicas.len() })
}

/// Richardson–Romberg combination `2 m(alpha) - m(2 alpha)`.
pub fn rr_extrapolate(mean_at_alpha: &[f64], mean_at_2alpha: &[f64]) -> Result<Vec<f64>> {
    if mean_at_alpha.len() != mean_at_2alpha.len() {
        return Err(Error::DimensionMismatch { expected: mean_at_alpha.len(), got: mean_at_2alpha.len() });
    }
    Ok(mean_at_alpha.iter().zip(mean_at_2alpha).map(|(a, b)| 2.0 * a - b).collect())
}

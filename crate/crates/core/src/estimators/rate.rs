//! Geometric decay rate of coupled-pair distances.

use serde::Serialize;

use crate::engine::CoupledTrace;
use crate::error::{Error, Result};

/// Squared distances at or below this are treated as "met".
const FLOOR: f64 = 1e-250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    /// Slope of `ln E d^2` against the step index (per step, negative when contracting).
    pub rate: f64,
    pub r_squared: f64,
    /// Fitted window `[start, end)` in steps.
    pub window: (usize, usize),
}

/// Least-squares slope of `ln E d(Z_k, Z'_k)^2` over the steps before the
/// averaged distance reaches zero.
pub fn geometric_rate_fit(trace: &CoupledTrace) -> Result<RateFit> {
    let d = &trace.joint_sq;
    if d.len() < 100 {
        return Err(Error::InsufficientData(format!("trace has {} points, need at least 100", d.len())));
    }
    let end = d.iter().position(|v| !(*v > FLOOR)).unwrap_or(d.len());
    if end < 3 {
        return Err(Error::InsufficientData(
            "pairs met immediately; the distance trace is degenerate and has no rate".into(),
        ));
    }
    let n = end as f64;
    let mx = (n - 1.0) / 2.0;
    let ys: Vec<f64> = d[..end].iter().map(|v| v.ln()).collect();
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (k, y) in ys.iter().enumerate() {
        let dx = k as f64 - mx;
        sxx += dx * dx;
        sxy += dx * (y - my);
        syy += (y - my) * (y - my);
    }
    let rate = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(RateFit { rate, r_squared, window: (0, end) })
}

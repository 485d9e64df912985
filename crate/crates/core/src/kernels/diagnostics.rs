//! Empirical contraction and sensitivity constants via synchronous coupling.

use serde::Serialize;

use super::ControlledKernel;
use crate::error::{check_finite, Error, Result};
use crate::linalg::dist_sq;
use crate::rng::{stream, DrawBuffer};

/// Coupled draws per start pair when estimating the one-step contraction.
const DRAWS_PER_PAIR: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelDiagnostics {
    /// `1 - max_pairs W2-ratio`, clamped to `[0, 1]`.
    pub rho_hat: f64,
    /// Largest coupled sensitivity ratio over probed states and coordinates.
    pub lp_hat: f64,
    pub n_pairs: usize,
    /// Width of the 95% normal interval for the mean per-pair ratio.
    pub ci_width: f64,
    /// Pairs with identical start states (ratio undefined).
    pub skipped_pairs: usize,
    /// Set when no pair of distinct states could be sampled.
    pub degenerate: bool,
}

/// Estimates `rho` and `L_P` at `theta` with common-draw coupling.
///
/// For each sampled pair `(x, x')` the coupled one-step root-mean-square
/// distance over [`DRAWS_PER_PAIR`] shared draws is divided by `d(x, x')`;
/// this upper-bounds the `W2` ratio.
pub fn estimate_contraction<K: ControlledKernel>(
    kernel: &K,
    theta: &[f64],
    n_pairs: usize,
    seed: u64,
) -> Result<KernelDiagnostics> {
    if n_pairs < 100 {
        return Err(Error::config("n_pairs", format!("need at least 100 pairs, got {n_pairs}")));
    }
    check_finite("theta", theta)?;
    let mut rng = stream(seed, 0);
    let mut buf = DrawBuffer::new(kernel.draw_spec(), 0);
    let mut ratios = Vec::with_capacity(n_pairs);
    let mut skipped = 0;
    for _ in 0..n_pairs {
        let x = kernel.random_state(&mut rng);
        let y = kernel.random_state(&mut rng);
        let d0 = kernel.distance(&x, &y);
        if d0 <= 0.0 {
            skipped += 1;
            continue;
        }
        let mut sq = 0.0;
        for _ in 0..DRAWS_PER_PAIR {
            buf.fill(&mut rng);
            let nx = kernel.sample_next(theta, &x, buf.kernel())?;
            let ny = kernel.sample_next(theta, &y, buf.kernel())?;
            let d = kernel.distance(&nx, &ny);
            sq += d * d;
        }
        ratios.push((sq / DRAWS_PER_PAIR as f64).sqrt() / d0);
    }

    let lp_hat = probe_sensitivity(kernel, theta, n_pairs, seed)?;
    if ratios.is_empty() {
        return Ok(KernelDiagnostics {
            rho_hat: 1.0,
            lp_hat,
            n_pairs,
            ci_width: 0.0,
            skipped_pairs: skipped,
            degenerate: true,
        });
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = if ratios.len() > 1 {
        ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(KernelDiagnostics {
        rho_hat: (1.0 - max_ratio).clamp(0.0, 1.0),
        lp_hat,
        n_pairs,
        ci_width: 2.0 * 1.96 * (var / n).sqrt(),
        skipped_pairs: skipped,
        degenerate: false,
    })
}

/// Largest sensitivity ratio over a handful of states and each coordinate.
fn probe_sensitivity<K: ControlledKernel>(kernel: &K, theta: &[f64], n_samples: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 1);
    let probes: Vec<K::State> = match kernel.states() {
        Some(all) if all.len() <= 16 => all,
        _ => (0..8).map(|_| kernel.random_state(&mut rng)).collect(),
    };
    let step = 1e-2 * (1.0 + dist_sq(theta, &vec![0.0; theta.len()]).sqrt());
    let mut best: f64 = 0.0;
    for (p, x) in probes.iter().enumerate() {
        for i in 0..theta.len() {
            let mut lo = theta.to_vec();
            let mut hi = theta.to_vec();
            lo[i] -= step / 2.0;
            hi[i] += step / 2.0;
            let sub = seed.wrapping_add(((p * theta.len() + i) as u64 + 2) << 20);
            best = best.max(estimate_sensitivity(kernel, x, &lo, &hi, n_samples, sub)?);
        }
    }
    Ok(best)
}

/// Mean common-draw distance between `P_theta(x, .)` and `P_theta'(x, .)`
/// divided by `|theta - theta'|`.
pub fn estimate_sensitivity<K: ControlledKernel>(
    kernel: &K,
    x: &K::State,
    theta: &[f64],
    theta_prime: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if theta.len() != theta_prime.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), got: theta_prime.len() });
    }
    let gap = dist_sq(theta, theta_prime).sqrt();
    if gap == 0.0 {
        return Err(Error::config("theta_prime", "must differ from theta"));
    }
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be positive"));
    }
    let mut rng = stream(seed, 0);
    let mut buf = DrawBuffer::new(kernel.draw_spec(), 0);
    let mut total = 0.0;
    for _ in 0..n_samples {
        buf.fill(&mut rng);
        let a = kernel.sample_next(theta, x, buf.kernel())?;
        let b = kernel.sample_next(theta_prime, x, buf.kernel())?;
        total += kernel.distance(&a, &b);
    }
    Ok(total / n_samples as f64 / gap)
}

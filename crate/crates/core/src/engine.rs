//! The constant-stepsize recursion
//! `X_{k+1} ~ P_{theta_k}(X_k, .)`, `theta_{k+1} = theta_k + alpha (g(theta_k, X_{k+1}) + xi_{k+1})`,
//! streaming moment accumulators, and synchronously coupled chain pairs.
//!
//! Replica `r` always draws from `rng::stream(seed, r)` and replicas are
//! merged in index order, so results do not depend on the thread pool.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::kernels::ControlledKernel;
use crate::linalg::norm;
use crate::mean_field::UpdateMap;
use crate::rng::{stream, DrawBuffer, Draws};

/// Default burn-in safety factor: `20 ln 10`, i.e. `1e-20` forgetting at rate `tau`.
pub const BURN_IN_FACTOR: f64 = 20.0 * std::f64::consts::LN_10;

/// Divergence guard multiplier on `1 + |theta_0|`.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Additive noise `xi`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    /// `xi = scale * Z`.
    Gaussian { scale: f64 },
    /// `xi = scale * sqrt(1 + |theta|^2) * Z`.
    ThetaScaled { scale: f64 },
}

impl NoiseSpec {
    pub fn draws(&self, dim: usize) -> usize {
        match self {
            NoiseSpec::None => 0,
            _ => dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Gaussian { scale } | NoiseSpec::ThetaScaled { scale } => {
                if scale >= 0.0 && scale.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config("noise.scale", format!("must be non-negative, got {scale}")))
                }
            }
        }
    }

    /// Multiplier applied to the standard normal draws at `theta`.
    #[inline]
    fn factor(&self, theta: &[f64]) -> f64 {
        match *self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Gaussian { scale } => scale,
            NoiseSpec::ThetaScaled { scale } => scale * (1.0 + theta.iter().map(|t| t * t).sum::<f64>()).sqrt(),
        }
    }
}

/// `tau(alpha) = min(mu_g alpha / 8, rho / 4)`.
pub fn forgetting_rate(alpha: f64, mu_g: f64, rho: f64) -> f64 {
    (mu_g * alpha / 8.0).min(rho / 4.0)
}

/// `ceil(c / tau)`.
pub fn default_burn_in(tau: f64, factor: f64) -> Result<u64> {
    if !(tau > 0.0) {
        return Err(Error::config("tau", format!("forgetting rate must be positive, got {tau}")));
    }
    Ok((factor / tau).ceil() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaConfig {
    pub alpha: f64,
    /// Total steps, burn-in included.
    pub n_steps: u64,
    pub burn_in: u64,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub replica_count: usize,
    /// Highest moment order `n` tracked as `E|Delta|^{2n}`.
    #[serde(default = "default_moment_order")]
    pub moment_order: usize,
    /// Keep every `thin`-th post-burn-in iterate.
    #[serde(default)]
    pub thin: Option<u64>,
}

fn default_moment_order() -> usize {
    2
}

impl SaConfig {
    pub fn new(alpha: f64, n_steps: u64, burn_in: u64, seed: u64) -> Self {
        SaConfig {
            alpha,
            n_steps,
            burn_in,
            seed,
            noise: NoiseSpec::None,
            replica_count: 1,
            moment_order: 2,
            thin: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        if self.burn_in >= self.n_steps {
            return Err(Error::config(
                "burn_in",
                format!("burn-in {} must be below n_steps {}", self.burn_in, self.n_steps),
            ));
        }
        if self.replica_count == 0 {
            return Err(Error::config("replica_count", "need at least one replica"));
        }
        if self.moment_order == 0 {
            return Err(Error::config("moment_order", "must be at least 1"));
        }
        if self.thin == Some(0) {
            return Err(Error::config("thin", "thinning interval must be positive"));
        }
        self.noise.validate()
    }
}

/// Running sums of `Delta = theta - reference` over post-burn-in iterates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    pub alpha: f64,
    pub reference: Vec<f64>,
    pub count: u64,
    /// `sum Delta`.
    pub sum: Vec<f64>,
    /// `power_sums[n - 1] = sum |Delta|^{2n}`.
    pub power_sums: Vec<f64>,
    /// Row-major `sum Delta Delta^T`.
    pub cross: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(alpha: f64, reference: Vec<f64>, order: usize) -> Self {
        let d = reference.len();
        MomentAccumulator {
            alpha,
            count: 0,
            sum: vec![0.0; d],
            power_sums: vec![0.0; order.max(1)],
            cross: vec![0.0; d * d],
            reference,
        }
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    #[inline]
    pub fn push(&mut self, theta: &[f64]) {
        let d = self.reference.len();
        self.count += 1;
        if d == 1 {
            let delta = theta[0] - self.reference[0];
            let sq = delta * delta;
            self.sum[0] += delta;
            self.cross[0] += sq;
            self.add_powers(sq);
            return;
        }
        let mut sq = 0.0;
        for i in 0..d {
            let di = theta[i] - self.reference[i];
            self.sum[i] += di;
            sq += di * di;
            for j in 0..d {
                self.cross[i * d + j] += di * (theta[j] - self.reference[j]);
            }
        }
        self.add_powers(sq);
    }

    #[inline]
    fn add_powers(&mut self, sq: f64) {
        let mut p = sq;
        for s in &mut self.power_sums {
            *s += p;
            p *= sq;
        }
    }

    /// Adds another accumulator's sums; merging in a fixed order is deterministic.
    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if other.reference != self.reference || other.power_sums.len() != self.power_sums.len() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.power_sums.iter_mut().zip(&other.power_sums) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
        Ok(())
    }

    /// Time-average of `Delta`.
    pub fn mean_delta(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        Ok(self.sum.iter().map(|s| s / self.count as f64).collect())
    }

    /// Time-average of `theta`.
    pub fn mean_theta(&self) -> Result<Vec<f64>> {
        Ok(self.mean_delta()?.iter().zip(&self.reference).map(|(m, r)| m + r).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSnapshot {
    pub count: u64,
    pub mean_delta: Vec<f64>,
    /// `E|Delta|^2`.
    pub m2: f64,
    /// `E|Delta|^4` (NaN when the accumulator tracks only second moments).
    pub m4: f64,
    /// `E|Delta|^{2n}` for `n = 1..=order`.
    pub power_moments: Vec<f64>,
    /// `E[Delta Delta^T] / alpha`.
    pub m_alpha: DMatrix<f64>,
}

/// Centered moments of an accumulator around `theta_star`.
pub fn moment_snapshot(acc: &MomentAccumulator, theta_star: &[f64]) -> Result<MomentSnapshot> {
    if acc.count == 0 {
        return Err(Error::EmptyAccumulator);
    }
    if theta_star != acc.reference.as_slice() {
        return Err(Error::config("theta_star", "accumulator was centered at a different reference point"));
    }
    let n = acc.count as f64;
    let d = acc.dim();
    let power_moments: Vec<f64> = acc.power_sums.iter().map(|s| s / n).collect();
    Ok(MomentSnapshot {
        count: acc.count,
        mean_delta: acc.mean_delta()?,
        m2: power_moments[0],
        m4: power_moments.get(1).copied().unwrap_or(f64::NAN),
        power_moments,
        m_alpha: DMatrix::from_row_slice(d, d, &acc.cross) / (n * acc.alpha),
    })
}

/// One step of the recursion.
///
/// `noise` holds standard normal draws (empty when `noise_spec` is `None`).
#[allow(clippy::too_many_arguments)]
pub fn sa_step<S, K, M>(
    theta: &[f64],
    x: &S,
    alpha: f64,
    map: &M,
    kernel: &K,
    draws: Draws<'_>,
    noise: &[f64],
    noise_spec: &NoiseSpec,
) -> Result<(Vec<f64>, S)>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    let mut next = theta.to_vec();
    let mut g = vec![0.0; theta.len()];
    let x_next = step_in_place(&mut next, x, alpha, map, kernel, draws, noise, noise_spec, &mut g)?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0, norm: norm(&next) });
    }
    Ok((next, x_next))
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn step_in_place<S, K, M>(
    theta: &mut [f64],
    x: &S,
    alpha: f64,
    map: &M,
    kernel: &K,
    draws: Draws<'_>,
    noise: &[f64],
    noise_spec: &NoiseSpec,
    g: &mut [f64],
) -> Result<S>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    let x_next = kernel.sample_next(theta, x, draws)?;
    map.eval(theta, &x_next, g);
    if noise.is_empty() {
        for (t, gi) in theta.iter_mut().zip(g.iter()) {
            *t += alpha * gi;
        }
    } else {
        let f = noise_spec.factor(theta);
        for ((t, gi), z) in theta.iter_mut().zip(g.iter()).zip(noise) {
            *t += alpha * (gi + f * z);
        }
    }
    Ok(x_next)
}

/// Runs one chain for `n_steps` from `(theta0, x0)` with its own random stream,
/// calling `observer(k, theta_k, x_k)` after every step `k = 1..=n_steps`.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<S, K, M, F>(
    map: &M,
    kernel: &K,
    alpha: f64,
    noise_spec: &NoiseSpec,
    theta0: &[f64],
    x0: &S,
    n_steps: u64,
    rng: &mut crate::rng::StreamRng,
    mut observer: F,
) -> Result<(Vec<f64>, S)>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
    S: Clone,
    F: FnMut(u64, &[f64], &S),
{
    let d = theta0.len();
    if map.dim() != d {
        return Err(Error::DimensionMismatch { expected: map.dim(), got: d });
    }
    check_finite("theta0", theta0)?;
    let guard = DIVERGENCE_FACTOR * (1.0 + norm(theta0));
    let guard_sq = guard * guard;
    let mut buf = DrawBuffer::new(kernel.draw_spec(), noise_spec.draws(d));
    let mut theta = theta0.to_vec();
    let mut x = x0.clone();
    let mut g = vec![0.0; d];
    for k in 1..=n_steps {
        buf.fill(rng);
        x = step_in_place(&mut theta, &x, alpha, map, kernel, buf.kernel(), buf.noise(), noise_spec, &mut g)?;
        let sq: f64 = theta.iter().map(|t| t * t).sum();
        if !(sq <= guard_sq) {
            return Err(Error::Divergence { step: k, norm: sq.sqrt() });
        }
        observer(k, &theta, &x);
    }
    Ok((theta, x))
}

/// Thinned post-burn-in iterates of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub replica: usize,
    /// `(k, theta_k, X_k)`.
    pub points: Vec<(u64, Vec<f64>, S)>,
}

#[derive(Debug, Clone)]
pub struct SaRun<S> {
    /// One accumulator per replica, in replica order.
    pub replicas: Vec<MomentAccumulator>,
    pub trajectories: Vec<Trajectory<S>>,
    /// Final `(theta, X)` of each replica.
    pub finals: Vec<(Vec<f64>, S)>,
}

impl<S> SaRun<S> {
    /// All replicas merged in index order.
    pub fn merged(&self) -> Result<MomentAccumulator> {
        let mut it = self.replicas.iter();
        let mut acc = it.next().ok_or(Error::EmptyAccumulator)?.clone();
        for r in it {
            acc.merge(r)?;
        }
        Ok(acc)
    }
}

/// Runs `replica_count` independent chains in parallel; statistics skip burn-in.
///
/// `reference` is the centering point for `Delta` (normally `theta*`).
pub fn run_sa<S, K, M>(
    config: &SaConfig,
    map: &M,
    kernel: &K,
    theta0: &[f64],
    x0: &S,
    reference: &[f64],
) -> Result<SaRun<S>>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
    S: Clone + Send + Sync,
{
    config.validate()?;
    if reference.len() != theta0.len() {
        return Err(Error::DimensionMismatch { expected: theta0.len(), got: reference.len() });
    }
    let results: Vec<Result<(MomentAccumulator, Trajectory<S>, (Vec<f64>, S))>> = (0..config.replica_count)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(config.seed, r as u64);
            let mut acc = MomentAccumulator::new(config.alpha, reference.to_vec(), config.moment_order);
            let mut traj = Trajectory { replica: r, points: Vec::new() };
            let burn_in = config.burn_in;
            let thin = config.thin;
            let fin = run_chain(
                map,
                kernel,
                config.alpha,
                &config.noise,
                theta0,
                x0,
                config.n_steps,
                &mut rng,
                |k, theta, x| {
                    if k > burn_in {
                        acc.push(theta);
                        if let Some(s) = thin {
                            if (k - burn_in) % s == 0 {
                                traj.points.push((k, theta.to_vec(), x.clone()));
                            }
                        }
                    }
                },
            )?;
            Ok((acc, traj, fin))
        })
        .collect();
    let mut run = SaRun { replicas: Vec::new(), trajectories: Vec::new(), finals: Vec::new() };
    for res in results {
        let (acc, traj, fin) = res?;
        run.replicas.push(acc);
        if config.thin.is_some() {
            run.trajectories.push(traj);
        }
        run.finals.push(fin);
    }
    Ok(run)
}

/// Per-step mean squared distances of synchronously coupled pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledTrace {
    pub alpha: f64,
    pub pairs: usize,
    /// `E|theta_k - theta'_k|^2`, `k = 0..=n_steps`.
    pub theta_sq: Vec<f64>,
    /// `E d_X(X_k, X'_k)^2`.
    pub state_sq: Vec<f64>,
    /// `E d(Z_k, Z'_k)^2 = theta_sq + state_sq`.
    pub joint_sq: Vec<f64>,
    /// Per pair: first step at which the two chains coincide exactly.
    pub meeting_times: Vec<Option<u64>>,
}

impl CoupledTrace {
    pub fn len(&self) -> usize {
        self.joint_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint_sq.is_empty()
    }

    /// Fraction of pairs that met within the horizon.
    pub fn met_fraction(&self) -> f64 {
        if self.meeting_times.is_empty() {
            return 0.0;
        }
        self.meeting_times.iter().filter(|m| m.is_some()).count() as f64 / self.meeting_times.len() as f64
    }
}

const PAIR_CHUNK: usize = 16;

/// Runs `replica_count` coupled pairs for `n_steps` (burn-in is ignored):
/// both chains of a pair consume the same kernel and noise draws at every step.
pub fn run_coupled<S, K, M>(
    config: &SaConfig,
    map: &M,
    kernel: &K,
    z0: (&[f64], &S),
    z0_prime: (&[f64], &S),
) -> Result<CoupledTrace>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
    S: Clone + Send + Sync,
{
    if !(config.alpha >= 0.0 && config.alpha <= 1.0) {
        return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", config.alpha)));
    }
    config.noise.validate()?;
    let d = z0.0.len();
    if z0_prime.0.len() != d || map.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: z0_prime.0.len() });
    }
    check_finite("theta0", z0.0)?;
    check_finite("theta0_prime", z0_prime.0)?;
    let len = config.n_steps as usize + 1;
    let guard = DIVERGENCE_FACTOR * (1.0 + norm(z0.0).max(norm(z0_prime.0)));

    let run_pair = |r: usize| -> Result<(Vec<f64>, Vec<f64>, Option<u64>)> {
        let mut rng = stream(config.seed, r as u64);
        let mut buf = DrawBuffer::new(kernel.draw_spec(), config.noise.draws(d));
        let (mut a, mut x) = (z0.0.to_vec(), z0.1.clone());
        let (mut b, mut y) = (z0_prime.0.to_vec(), z0_prime.1.clone());
        let (mut ga, mut gb) = (vec![0.0; d], vec![0.0; d]);
        let mut th = Vec::with_capacity(len);
        let mut st = Vec::with_capacity(len);
        let record = |a: &[f64], b: &[f64], x: &S, y: &S, th: &mut Vec<f64>, st: &mut Vec<f64>| {
            let t: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
            let s = kernel.distance(x, y);
            th.push(t);
            st.push(s * s);
        };
        record(&a, &b, &x, &y, &mut th, &mut st);
        let mut met = (th[0] + st[0] == 0.0).then_some(0);
        for k in 1..len as u64 {
            buf.fill(&mut rng);
            x = step_in_place(&mut a, &x, config.alpha, map, kernel, buf.kernel(), buf.noise(), &config.noise, &mut ga)?;
            y = step_in_place(&mut b, &y, config.alpha, map, kernel, buf.kernel(), buf.noise(), &config.noise, &mut gb)?;
            if !(norm(&a) <= guard && norm(&b) <= guard) {
                return Err(Error::Divergence { step: k, norm: norm(&a).max(norm(&b)) });
            }
            record(&a, &b, &x, &y, &mut th, &mut st);
            let k_us = k as usize;
            if met.is_none() && th[k_us] + st[k_us] == 0.0 {
                met = Some(k);
            }
        }
        Ok((th, st, met))
    };

    let mut theta_sq = vec![0.0; len];
    let mut state_sq = vec![0.0; len];
    let mut meeting_times = Vec::with_capacity(config.replica_count);
    let ids: Vec<usize> = (0..config.replica_count).collect();
    for chunk in ids.chunks(PAIR_CHUNK) {
        let results: Vec<_> = chunk.par_iter().map(|&r| run_pair(r)).collect();
        for res in results {
            let (th, st, met) = res?;
            for k in 0..len {
                theta_sq[k] += th[k];
                state_sq[k] += st[k];
            }
            meeting_times.push(met);
        }
    }
    let n = config.replica_count.max(1) as f64;
    theta_sq.iter_mut().for_each(|v| *v /= n);
    state_sq.iter_mut().for_each(|v| *v /= n);
    let joint_sq = theta_sq.iter().zip(&state_sq).map(|(a, b)| a + b).collect();
    Ok(CoupledTrace { alpha: config.alpha, pairs: config.replica_count, theta_sq, state_sq, joint_sq, meeting_times })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ClippedArKernel, FiniteKernel, Response, TwoStateFamily};
    use crate::mean_field::{AffineMap, StateTable};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// `g(theta, x) = c(x)`, independent of theta.
    struct ConstMap(f64);
    impl UpdateMap<usize> for ConstMap {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _t: &[f64], _x: &usize, out: &mut [f64]) {
            out[0] = self.0;
        }
    }

    fn minus_theta() -> AffineMap<StateTable> {
        AffineMap::linear_hx(StateTable::scalar(&[0.0, 0.0]).unwrap())
    }

    fn fixed_chain() -> FiniteKernel<TwoStateFamily> {
        FiniteKernel::new(TwoStateFamily::constant(0.3, 0.4))
    }

    #[test]
    fn step_arithmetic() {
        let (t, _) = sa_step(
            &[0.0],
            &0usize,
            0.1,
            &ConstMap(2.0),
            &fixed_chain(),
            Draws::new(&[0.5], &[]),
            &[-1.0],
            &NoiseSpec::Gaussian { scale: 1.0 },
        )
        .unwrap();
        assert_abs_diff_eq!(t[0], 0.1, epsilon = 1e-15);

        let (t, _) =
            sa_step(&[0.7], &0usize, 0.0, &ConstMap(2.0), &fixed_chain(), Draws::new(&[0.5], &[]), &[], &NoiseSpec::None)
                .unwrap();
        assert_eq!(t[0], 0.7);
    }

    #[test]
    fn zero_uniform_moves_to_first_positive_state() {
        let map = AffineMap::linear_hx(StateTable::scalar(&[1.0, -1.0]).unwrap());
        let (t, x) =
            sa_step(&[0.0], &1usize, 0.5, &map, &fixed_chain(), Draws::new(&[0.0], &[]), &[], &NoiseSpec::None).unwrap();
        assert_eq!(x, 0);
        assert_eq!(t[0], 0.5);
    }

    #[test]
    fn noiseless_linear_decay() {
        let mut cfg = SaConfig::new(0.1, 200, 100, 1);
        cfg.replica_count = 1;
        let run = run_sa(&cfg, &minus_theta(), &fixed_chain(), &[1.0], &0, &[0.0]).unwrap();
        let snap = moment_snapshot(&run.merged().unwrap(), &[0.0]).unwrap();
        assert!(snap.m2 <= 0.9f64.powi(200) && snap.m2 < 1e-9);
    }

    #[test]
    fn ar1_stationary_variance() {
        let alpha = 0.1;
        let mut cfg = SaConfig::new(alpha, 210_000, 10_000, 17);
        cfg.noise = NoiseSpec::Gaussian { scale: 1.0 };
        cfg.replica_count = 16;
        let run = run_sa(&cfg, &minus_theta(), &fixed_chain(), &[0.0], &0, &[0.0]).unwrap();
        let m2: Vec<f64> = run.replicas.iter().map(|a| a.power_sums[0] / a.count as f64).collect();
        let n = m2.len() as f64;
        let mean = m2.iter().sum::<f64>() / n;
        let se = (m2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let exact = alpha / (2.0 - alpha);
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
        let snap = moment_snapshot(&run.merged().unwrap(), &[0.0]).unwrap();
        assert!((snap.m_alpha[(0, 0)] - 1.0 / (2.0 - alpha)).abs() < 0.02);
    }

    #[test]
    fn replicas_with_same_seed_are_identical() {
        let mut cfg = SaConfig::new(0.05, 5_000, 1_000, 3);
        cfg.noise = NoiseSpec::ThetaScaled { scale: 0.5 };
        cfg.replica_count = 2;
        let a = run_sa(&cfg, &minus_theta(), &fixed_chain(), &[0.5], &0, &[0.0]).unwrap();
        let b = run_sa(&cfg, &minus_theta(), &fixed_chain(), &[0.5], &0, &[0.0]).unwrap();
        assert_eq!(a.replicas, b.replicas);
        assert_ne!(a.replicas[0], a.replicas[1]);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut cfg = SaConfig::new(0.05, 4_000, 500, 9);
        cfg.noise = NoiseSpec::Gaussian { scale: 1.0 };
        cfg.replica_count = 12;
        let run_with = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_sa(&cfg, &minus_theta(), &fixed_chain(), &[0.0], &0, &[0.0]).unwrap().replicas)
        };
        assert_eq!(run_with(1), run_with(8));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        struct Explode;
        impl UpdateMap<usize> for Explode {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, t: &[f64], _x: &usize, out: &mut [f64]) {
                out[0] = 10.0 * t[0];
            }
        }
        let cfg = SaConfig::new(1.0, 100, 1, 0);
        // theta_k = 11^k crosses 1e6 * (1 + 1) at k = 7.
        let err = run_sa(&cfg, &Explode, &fixed_chain(), &[1.0], &0, &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step == 7));
    }

    #[test]
    fn config_validation() {
        assert!(SaConfig::new(0.0, 10, 1, 0).validate().is_err());
        assert!(SaConfig::new(1.5, 10, 1, 0).validate().is_err());
        assert!(SaConfig::new(0.5, 10, 10, 0).validate().is_err());
        assert_eq!(default_burn_in(0.01, BURN_IN_FACTOR).unwrap(), (BURN_IN_FACTOR / 0.01).ceil() as u64);
        assert_eq!(forgetting_rate(0.08, 1.0, 1.0), 0.01);
    }

    #[test]
    fn snapshot_examples() {
        let mut acc = MomentAccumulator::new(0.5, vec![0.0], 2);
        assert_eq!(moment_snapshot(&acc, &[0.0]).unwrap_err(), Error::EmptyAccumulator);
        acc.push(&[-1.0]);
        acc.push(&[1.0]);
        let s = moment_snapshot(&acc, &[0.0]).unwrap();
        assert_eq!((s.mean_delta[0], s.m2, s.m4), (0.0, 1.0, 1.0));
        assert_eq!(s.m_alpha[(0, 0)], 2.0);

        let mut zero = MomentAccumulator::new(0.1, vec![0.0, 0.0], 2);
        zero.push(&[0.0, 0.0]);
        let s = moment_snapshot(&zero, &[0.0, 0.0]).unwrap();
        assert_eq!((s.m2, s.m4), (0.0, 0.0));
    }

    #[test]
    fn coupled_identical_start_stays_together() {
        let mut cfg = SaConfig::new(0.05, 500, 0, 2);
        cfg.noise = NoiseSpec::Gaussian { scale: 1.0 };
        cfg.replica_count = 4;
        let map = AffineMap::linear_hx(StateTable::scalar(&[1.0, -1.0]).unwrap());
        let k = FiniteKernel::new(TwoStateFamily::new(Response::tanh(0.5, 0.2), Response::tanh(0.5, -0.2)));
        let tr = run_coupled(&cfg, &map, &k, (&[0.3], &1), (&[0.3], &1)).unwrap();
        assert!(tr.joint_sq.iter().all(|v| *v == 0.0));
        assert_eq!(tr.met_fraction(), 1.0);
    }

    #[test]
    fn coupled_linear_contraction_is_exact() {
        let alpha = 0.1;
        let mut cfg = SaConfig::new(alpha, 50, 0, 2);
        cfg.replica_count = 3;
        let tr = run_coupled(&cfg, &minus_theta(), &fixed_chain(), (&[1.0], &0), (&[-1.0], &0)).unwrap();
        for (k, v) in tr.theta_sq.iter().enumerate() {
            let expected = 4.0 * (1.0 - alpha).powi(2 * k as i32);
            assert!((v - expected).abs() <= 1e-12 * expected.max(1e-300), "{k}: {v} vs {expected}");
        }
    }

    #[test]
    fn coupled_clipped_states_contract_pathwise() {
        let k = ClippedArKernel::new(0.6, Response::Constant { value: 0.5 }, Response::Constant { value: 2.0 }, 3.0)
            .unwrap();
        struct Zero;
        impl UpdateMap<f64> for Zero {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, _t: &[f64], _x: &f64, out: &mut [f64]) {
                out[0] = 0.0;
            }
        }
        let mut cfg = SaConfig::new(0.1, 40, 0, 5);
        cfg.replica_count = 1;
        let tr = run_coupled(&cfg, &Zero, &k, (&[0.0], &3.0), (&[0.0], &-3.0)).unwrap();
        for (i, v) in tr.state_sq.iter().enumerate() {
            assert!(v.sqrt() <= 0.6f64.powi(i as i32) * 6.0 + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn jensen_and_psd_hold_on_snapshots(values in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..60)) {
            let mut acc = MomentAccumulator::new(0.1, vec![0.2, -0.1], 3);
            for v in &values {
                acc.push(v);
            }
            let s = moment_snapshot(&acc, &[0.2, -0.1]).unwrap();
            prop_assert!(s.m4 >= s.m2 * s.m2 * (1.0 - 1e-12));
            let sym = (&s.m_alpha + s.m_alpha.transpose()) * 0.5;
            prop_assert!((&s.m_alpha - &sym).amax() <= 1e-10);
            let min_eig = sym.symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-10);
        }

        #[test]
        fn merge_is_order_consistent(split in 1usize..30) {
            let pts: Vec<f64> = (0..31).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut whole = MomentAccumulator::new(0.1, vec![0.0], 2);
            let mut a = MomentAccumulator::new(0.1, vec![0.0], 2);
            let mut b = MomentAccumulator::new(0.1, vec![0.0], 2);
            for (i, p) in pts.iter().enumerate() {
                whole.push(&[*p]);
                if i < split { a.push(&[*p]) } else { b.push(&[*p]) }
            }
            a.merge(&b).unwrap();
            prop_assert_eq!(a.count, whole.count);
            prop_assert!((a.power_sums[1] - whole.power_sums[1]).abs() < 1e-12);
        }
    }
}

//! Poisson equation `(I - P_theta) g_hat = g - gbar`, kernel operators, the
//! Gateaux derivative `Lambda[u] = d/dt P_{theta* + t u} g_hat` and the
//! quadratic-remainder scan of the kernel response.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_finite, Error, Result};
use crate::kernels::{stationary_distribution, ControlledKernel};
use crate::linalg::min_singular_value;
use crate::mean_field::UpdateMap;
use crate::rng::{stream, DrawBuffer};

/// Residual ceiling for exact finite-state solves.
pub const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoissonSolution {
    /// Row `i` holds `g_hat` at state (or query point) `i`; one column per component.
    pub values: DMatrix<f64>,
    /// `max_j |sum_x pi(x) g_hat(x)_j|` (exact solves only).
    pub centering_residual: f64,
    /// `|(I - P) g_hat - (f - pi f)|_inf` (exact solves only).
    pub equation_residual: f64,
    /// Series truncation depth, when the series was used.
    pub depth: Option<usize>,
    /// Geometric bound on the truncated tail.
    pub tail_bound: Option<f64>,
    /// Contraction estimate used for the tail bound.
    pub rho_hat: Option<f64>,
    /// Set when the contraction estimate was not positive.
    pub non_contracting: bool,
}

fn centered(pi: &DVector<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = pi.transpose() * f;
    let mut out = f.clone();
    for mut row in out.row_iter_mut() {
        row -= &mean;
    }
    out
}

fn check_law(p: &DMatrix<f64>, pi: &DVector<f64>, f: &DMatrix<f64>) -> Result<()> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::config("P", "transition matrix must be square"));
    }
    if pi.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: pi.len() });
    }
    if f.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: f.nrows() });
    }
    check_finite("f", f.as_slice())
}

/// Fundamental-matrix solve `(I - P + 1 pi^T) g_hat = f - pi f`, followed by
/// one step of iterative refinement.
pub fn poisson_solve_exact(p: &DMatrix<f64>, pi: &DVector<f64>, f: &DMatrix<f64>) -> Result<PoissonSolution> {
    check_law(p, pi, f)?;
    let n = p.nrows();
    let ft = centered(pi, f);
    let ones = DVector::from_element(n, 1.0);
    let a = DMatrix::identity(n, n) - p + &ones * pi.transpose();
    let lu = a.clone().lu();
    let mut g = lu
        .solve(&ft)
        .ok_or_else(|| Error::Numerical("fundamental matrix is singular (chain not ergodic?)".into()))?;
    let r = &ft - &a * &g;
    if let Some(c) = lu.solve(&r) {
        g += c;
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Poisson solution".into()));
    }
    let equation_residual = ((DMatrix::identity(n, n) - p) * &g - &ft).amax();
    let centering_residual = (pi.transpose() * &g).amax();
    Ok(PoissonSolution {
        values: g,
        centering_residual,
        equation_residual,
        depth: None,
        tail_bound: None,
        rho_hat: None,
        non_contracting: false,
    })
}

/// Dobrushin coefficient `1 - min_{i,j} sum_k min(P_ik, P_jk)`; the
/// oscillation of `P^t f` shrinks at least by this factor per step.
pub fn dobrushin_coefficient(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let overlap: f64 = (0..n).map(|k| p[(i, k)].min(p[(j, k)])).sum();
            worst = worst.max(1.0 - overlap);
        }
    }
    worst.clamp(0.0, 1.0)
}

/// `scale * (1 - rho)^depth / rho`: bound on `sum_{t >= depth} scale (1 - rho)^t`.
pub fn geometric_tail_bound(scale: f64, rho_hat: f64, depth: usize) -> Option<f64> {
    if !(rho_hat > 0.0) {
        return None;
    }
    Some(scale * (1.0 - rho_hat.min(1.0)).powi(depth as i32) / rho_hat.min(1.0))
}

/// Truncated series `sum_{t < depth} (P^t f - pi f)` for a finite chain.
pub fn poisson_series_matrix(
    p: &DMatrix<f64>,
    pi: &DVector<f64>,
    f: &DMatrix<f64>,
    depth: usize,
) -> Result<PoissonSolution> {
    check_law(p, pi, f)?;
    if depth == 0 {
        return Err(Error::config("depth", "depth must be at least 1"));
    }
    let n = p.nrows();
    let ft = centered(pi, f);
    let mut term = ft.clone();
    let mut sum = ft.clone();
    for _ in 1..depth {
        term = p * &term;
        sum += &term;
    }
    let rho_hat = 1.0 - dobrushin_coefficient(p);
    let osc = ft
        .column_iter()
        .map(|c| c.max() - c.min())
        .fold(0.0, f64::max);
    let tail_bound = geometric_tail_bound(osc, rho_hat, depth);
    let equation_residual = ((DMatrix::identity(n, n) - p) * &sum - &ft).amax();
    let centering_residual = (pi.transpose() * &sum).amax();
    Ok(PoissonSolution {
        values: sum,
        centering_residual,
        equation_residual,
        depth: Some(depth),
        tail_bound,
        rho_hat: Some(rho_hat),
        non_contracting: tail_bound.is_none(),
    })
}

/// Observable on a kernel's states: `f(x, out)`.
pub type StateFn<'a, S> = &'a (dyn Fn(&S, &mut [f64]) + Sync);

/// Monte Carlo settings for series and operator images on continuous kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RolloutBudget {
    /// Rollouts per query point.
    pub rollouts: usize,
    /// Steps of the frozen chain used to estimate `pi_theta f`.
    pub stationary_steps: u64,
    pub seed: u64,
    /// Contraction estimate for the tail bound (e.g. from diagnostics).
    pub rho_hat: Option<f64>,
}

impl Default for RolloutBudget {
    fn default() -> Self {
        RolloutBudget { rollouts: 1000, stationary_steps: 100_000, seed: 0, rho_hat: None }
    }
}

fn tabulate<S>(states: &[S], f: StateFn<'_, S>, dim: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(states.len(), dim);
    let mut buf = vec![0.0; dim];
    for (i, x) in states.iter().enumerate() {
        f(x, &mut buf);
        for j in 0..dim {
            out[(i, j)] = buf[j];
        }
    }
    out
}

/// Series solution at `query_points`: exact matrix powers for finite kernels,
/// rollout averages otherwise. An empty query list means every state of a
/// finite kernel.
pub fn poisson_solve_series<K: ControlledKernel>(
    kernel: &K,
    theta: &[f64],
    f: StateFn<'_, K::State>,
    dim: usize,
    depth: usize,
    query_points: &[K::State],
    budget: &RolloutBudget,
) -> Result<PoissonSolution> {
    check_finite("theta", theta)?;
    if depth == 0 {
        return Err(Error::config("depth", "depth must be at least 1"));
    }
    if let (Some(states), Some(p)) = (kernel.states(), kernel.transition_matrix(theta)) {
        let p = p?;
        let pi = stationary_distribution(&p)?;
        let full = poisson_series_matrix(&p, &pi, &tabulate(&states, f, dim), depth)?;
        if query_points.is_empty() {
            return Ok(full);
        }
        let mut values = DMatrix::zeros(query_points.len(), dim);
        for (r, q) in query_points.iter().enumerate() {
            let i = kernel.state_index(q).ok_or_else(|| Error::config("query_points", "unknown state"))?;
            values.set_row(r, &full.values.row(i));
        }
        return Ok(PoissonSolution { values, ..full });
    }
    if query_points.is_empty() {
        return Err(Error::config("query_points", "continuous kernels need explicit query points"));
    }
    if budget.rollouts == 0 || budget.stationary_steps == 0 {
        return Err(Error::config("budget", "budget must be positive"));
    }
    let pi_f = stationary_mean(kernel, theta, f, dim, budget.stationary_steps, budget.seed)?;
    let rows: Vec<Result<Vec<f64>>> = query_points
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut rng = stream(budget.seed, qi as u64 + 1);
            let mut buf = DrawBuffer::new(kernel.draw_spec(), 0);
            let mut acc = vec![0.0; dim];
            let mut fx = vec![0.0; dim];
            for _ in 0..budget.rollouts {
                let mut x = q.clone();
                for t in 0..depth {
                    if t > 0 {
                        buf.fill(&mut rng);
                        x = kernel.sample_next(theta, &x, buf.kernel())?;
                    }
                    f(&x, &mut fx);
                    for j in 0..dim {
                        acc[j] += fx[j] - pi_f[j];
                    }
                }
            }
            Ok(acc.into_iter().map(|a| a / budget.rollouts as f64).collect())
        })
        .collect();
    let mut values = DMatrix::zeros(query_points.len(), dim);
    for (r, row) in rows.into_iter().enumerate() {
        for (j, v) in row?.into_iter().enumerate() {
            values[(r, j)] = v;
        }
    }
    let scale = values.amax().max(1e-300);
    let tail_bound = budget.rho_hat.and_then(|r| geometric_tail_bound(scale, r, depth));
    Ok(PoissonSolution {
        values,
        centering_residual: f64::NAN,
        equation_residual: f64::NAN,
        depth: Some(depth),
        tail_bound,
        rho_hat: budget.rho_hat,
        non_contracting: budget.rho_hat.is_some_and(|r| r <= 0.0),
    })
}

fn stationary_mean<K: ControlledKernel>(
    kernel: &K,
    theta: &[f64],
    f: StateFn<'_, K::State>,
    dim: usize,
    steps: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream(seed, 0);
    let mut buf = DrawBuffer::new(kernel.draw_spec(), 0);
    let mut x = kernel.initial_state();
    let burn = (steps / 10).max(1);
    for _ in 0..burn {
        buf.fill(&mut rng);
        x = kernel.sample_next(theta, &x, buf.kernel())?;
    }
    let mut sum = vec![0.0; dim];
    let mut fx = vec![0.0; dim];
    for _ in 0..steps {
        buf.fill(&mut rng);
        x = kernel.sample_next(theta, &x, buf.kernel())?;
        f(&x, &mut fx);
        for j in 0..dim {
            sum[j] += fx[j];
        }
    }
    Ok(sum.into_iter().map(|s| s / steps as f64).collect())
}

/// `P_theta h` at `query_points` (every state of a finite kernel when empty):
/// a matrix-vector product for finite kernels, a one-step average otherwise.
pub fn apply_kernel<K: ControlledKernel>(
    kernel: &K,
    theta: &[f64],
    h: StateFn<'_, K::State>,
    dim: usize,
    query_points: &[K::State],
    n_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    check_finite("theta", theta)?;
    if let (Some(states), Some(p)) = (kernel.states(), kernel.transition_matrix(theta)) {
        let ph = p? * tabulate(&states, h, dim);
        if query_points.is_empty() {
            return Ok(ph);
        }
        let mut out = DMatrix::zeros(query_points.len(), dim);
        for (r, q) in query_points.iter().enumerate() {
            let i = kernel.state_index(q).ok_or_else(|| Error::config("query_points", "unknown state"))?;
            out.set_row(r, &ph.row(i));
        }
        return Ok(out);
    }
    if n_samples == 0 {
        return Err(Error::config("budget", "budget must be positive"));
    }
    let mut out = DMatrix::zeros(query_points.len(), dim);
    let mut buf = DrawBuffer::new(kernel.draw_spec(), 0);
    let mut hx = vec![0.0; dim];
    for (r, q) in query_points.iter().enumerate() {
        let mut rng = stream(seed, r as u64);
        for _ in 0..n_samples {
            buf.fill(&mut rng);
            let x = kernel.sample_next(theta, q, buf.kernel())?;
            h(&x, &mut hx);
            for j in 0..dim {
                out[(r, j)] += hx[j];
            }
        }
    }
    Ok(out / n_samples as f64)
}

/// Exact Poisson solution for `f(x) = g(theta*, x)` on a finite kernel,
/// together with `P_{theta*}` and `pi_{theta*}`.
pub fn poisson_for_map<S, K, M>(
    map: &M,
    kernel: &K,
    theta_star: &[f64],
) -> Result<(PoissonSolution, DMatrix<f64>, DVector<f64>)>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    let (states, p) = finite_parts(kernel, theta_star)?;
    let pi = stationary_distribution(&p)?;
    let f = tabulate(&states, &|x: &S, out: &mut [f64]| map.eval(theta_star, x, out), map.dim());
    let sol = poisson_solve_exact(&p, &pi, &f)?;
    Ok((sol, p, pi))
}

fn finite_parts<K: ControlledKernel>(kernel: &K, theta: &[f64]) -> Result<(Vec<K::State>, DMatrix<f64>)> {
    let states = kernel
        .states()
        .ok_or_else(|| Error::Unsupported("operation needs a finite kernel with exact matrices".into()))?;
    let p = kernel.transition_matrix(theta).expect("finite kernel provides matrices")?;
    Ok((states, p))
}

/// Linear response of `theta -> P_theta g_hat` at `theta*`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateauxOperator {
    /// `lambda[j]` is `Lambda[e_j]`: one row per state, one column per component of `g_hat`.
    pub lambda: Vec<DMatrix<f64>>,
    /// `lambda_bar[(i, j)] = sum_x pi(x) Lambda[e_j](x)_i`.
    pub lambda_bar: DMatrix<f64>,
    pub fd_steps: [f64; 2],
    /// Largest gap between the Richardson value and the finer central difference.
    pub richardson_error: f64,
    /// Coordinates whose Richardson error exceeded ten times the tolerance.
    pub suspect_directions: Vec<usize>,
}

impl GateauxOperator {
    /// `Lambda[u] = sum_j u_j Lambda[e_j]`.
    pub fn apply(&self, u: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.lambda[0].nrows(), self.lambda[0].ncols());
        for (l, uj) in self.lambda.iter().zip(u) {
            out += l * *uj;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }
}

/// Default central-difference steps.
pub const GATEAUX_STEPS: [f64; 2] = [1e-3, 5e-4];

/// Tolerance for flagging inconsistent finite differences.
pub const GATEAUX_TOL: f64 = 1e-6;

fn image<K: ControlledKernel>(kernel: &K, theta: &[f64], g_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = kernel.transition_matrix(theta).expect("finite kernel provides matrices")?;
    Ok(p * g_hat)
}

fn richardson(coarse: &DMatrix<f64>, fine: &DMatrix<f64>, ratio: f64) -> DMatrix<f64> {
    let r2 = ratio * ratio;
    (fine * r2 - coarse) / (r2 - 1.0)
}

/// Directional derivative `d/dt P_{theta + t u} g_hat` by central differences
/// at the two steps, with one Richardson level. Returns the value and the
/// Richardson error estimate.
pub fn gateaux_directional<K: ControlledKernel>(
    kernel: &K,
    theta: &[f64],
    g_hat: &DMatrix<f64>,
    u: &[f64],
    fd_steps: [f64; 2],
) -> Result<(DMatrix<f64>, f64)> {
    let [t1, t2] = fd_steps;
    if !(t1 > 0.0 && t2 > 0.0 && t1 != t2) {
        return Err(Error::config("fd_steps", "need two distinct positive steps"));
    }
    finite_parts(kernel, theta)?;
    let central = |t: f64| -> Result<DMatrix<f64>> {
        let plus: Vec<f64> = theta.iter().zip(u).map(|(a, b)| a + t * b).collect();
        let minus: Vec<f64> = theta.iter().zip(u).map(|(a, b)| a - t * b).collect();
        Ok((image(kernel, &plus, g_hat)? - image(kernel, &minus, g_hat)?) / (2.0 * t))
    };
    let coarse = central(t1)?;
    let fine = central(t2)?;
    let value = richardson(&coarse, &fine, t1 / t2);
    let err = (&value - &fine).amax();
    Ok((value, err))
}

/// `Lambda[e_j]` for every coordinate, and `Lambda_bar = E_pi[Lambda]`.
pub fn gateaux_derivative<K: ControlledKernel>(
    kernel: &K,
    theta_star: &[f64],
    g_hat: &PoissonSolution,
    fd_steps: Option<[f64; 2]>,
) -> Result<GateauxOperator> {
    let steps = fd_steps.unwrap_or(GATEAUX_STEPS);
    let d = theta_star.len();
    let (_, p) = finite_parts(kernel, theta_star)?;
    let pi = stationary_distribution(&p)?;
    let m = g_hat.values.ncols();
    let scale = 1.0 + g_hat.values.amax();
    let mut lambda = Vec::with_capacity(d);
    let mut lambda_bar = DMatrix::zeros(m, d);
    let mut richardson_error: f64 = 0.0;
    let mut suspect = Vec::new();
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let (l, err) = gateaux_directional(kernel, theta_star, &g_hat.values, &e, steps)?;
        if err > 10.0 * GATEAUX_TOL * scale {
            suspect.push(j);
        }
        richardson_error = richardson_error.max(err);
        let avg = pi.transpose() * &l;
        for i in 0..m {
            lambda_bar[(i, j)] = avg[i];
        }
        lambda.push(l);
    }
    Ok(GateauxOperator { lambda, lambda_bar, fd_steps: steps, richardson_error, suspect_directions: suspect })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WdRemainderReport {
    pub radii: Vec<f64>,
    /// `max_u sup_x |(P_{theta*+r u} - P_{theta*}) g_hat - r Lambda[u]|` per radius.
    pub sup_remainders: Vec<f64>,
    /// Least-squares slope of log remainder against log radius (`None` when exact).
    pub fitted_exponent: Option<f64>,
    /// `max_r remainder / r^2`.
    pub c_wd_hat: f64,
    /// All remainders vanish to rounding.
    pub exact: bool,
    /// Fitted exponent below 1.5.
    pub violation: bool,
    pub n_directions: usize,
}

/// Geometric radii from `hi` down to `lo`.
pub fn geometric_radii(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    let ratio = (lo / hi).powf(1.0 / (count.max(2) - 1) as f64);
    (0..count).map(|i| hi * ratio.powi(i as i32)).collect()
}

/// Number of random unit directions added to the coordinate directions.
pub const WD_RANDOM_DIRECTIONS: usize = 8;

/// Sup-norm remainder of the linear response over random and coordinate directions.
pub fn wd_remainder_scan<K: ControlledKernel>(
    kernel: &K,
    theta_star: &[f64],
    g_hat: &PoissonSolution,
    lambda: &GateauxOperator,
    radii: &[f64],
    seed: u64,
) -> Result<WdRemainderReport> {
    if radii.len() < 2 {
        return Err(Error::config("radii", "need at least two radii"));
    }
    if radii.windows(2).any(|w| !(w[0] > w[1])) || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::config("radii", "radii must be positive and strictly decreasing"));
    }
    let d = theta_star.len();
    let mut rng = stream(seed, 0);
    let mut directions: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();
    for _ in 0..WD_RANDOM_DIRECTIONS {
        directions.push(random_unit(&mut rng, d));
    }
    let base = image(kernel, theta_star, &g_hat.values)?;
    let responses: Vec<DMatrix<f64>> = directions.iter().map(|u| lambda.apply(u)).collect();
    let per_radius: Vec<Result<f64>> = radii
        .par_iter()
        .map(|&r| {
            let mut worst: f64 = 0.0;
            for (u, lu) in directions.iter().zip(&responses) {
                let t: Vec<f64> = theta_star.iter().zip(u).map(|(a, b)| a + r * b).collect();
                let rem = image(kernel, &t, &g_hat.values)? - &base - lu * r;
                worst = worst.max(rem.amax());
            }
            Ok(worst)
        })
        .collect();
    let sup_remainders: Vec<f64> = per_radius.into_iter().collect::<Result<_>>()?;
    let scale = 1.0 + g_hat.values.amax();
    let floor = 1e-14 * scale;
    let exact = sup_remainders.iter().all(|v| *v <= floor);
    let fitted_exponent = if exact {
        None
    } else {
        let pts: Vec<(f64, f64)> = radii
            .iter()
            .zip(&sup_remainders)
            .filter(|(_, v)| **v > floor)
            .map(|(r, v)| (r.ln(), v.ln()))
            .collect();
        ols_slope(&pts)
    };
    let c_wd_hat = radii.iter().zip(&sup_remainders).map(|(r, v)| v / (r * r)).fold(0.0, f64::max);
    Ok(WdRemainderReport {
        radii: radii.to_vec(),
        sup_remainders,
        violation: fitted_exponent.is_some_and(|e| e < 1.5),
        fitted_exponent,
        c_wd_hat,
        exact,
        n_directions: directions.len(),
    })
}

fn ols_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasOperator {
    pub matrix: DMatrix<f64>,
    pub min_singular_value: f64,
    pub invertible: bool,
}

/// Singular-value threshold for the invertibility verdict.
pub const INVERTIBILITY_THRESHOLD: f64 = 1e-8;

/// `Lambda_bar + J` with its smallest singular value.
pub fn bias_operator(lambda_bar: &DMatrix<f64>, jacobian: &DMatrix<f64>) -> Result<BiasOperator> {
    if lambda_bar.shape() != jacobian.shape() || !lambda_bar.is_square() {
        return Err(Error::DimensionMismatch { expected: jacobian.nrows(), got: lambda_bar.nrows() });
    }
    let matrix = lambda_bar + jacobian;
    let s = min_singular_value(&matrix);
    Ok(BiasOperator { matrix, min_singular_value: s, invertible: s > INVERTIBILITY_THRESHOLD })
}

/// Empirical operator bounds on a grid of decisions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageBounds {
    /// `max_x |g_hat(x)|_inf`.
    pub g_hat_sup: f64,
    /// `max_{theta, x} |P_theta g_hat(x)|_inf`.
    pub image_sup: f64,
    /// `max |P_theta g_hat - P_theta' g_hat|_inf / |theta - theta'|` over grid pairs.
    pub image_lipschitz: f64,
}

pub fn image_bounds<K: ControlledKernel>(kernel: &K, g_hat: &PoissonSolution, grid: &[Vec<f64>]) -> Result<ImageBounds> {
    let images: Vec<DMatrix<f64>> = grid.iter().map(|t| image(kernel, t, &g_hat.values)).collect::<Result<_>>()?;
    let image_sup = images.iter().map(|m| m.amax()).fold(0.0, f64::max);
    let mut lip: f64 = 0.0;
    for a in 0..grid.len() {
        for b in a + 1..grid.len() {
            let gap = grid[a].iter().zip(&grid[b]).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            if gap > 0.0 {
                lip = lip.max((&images[a] - &images[b]).amax() / gap);
            }
        }
    }
    Ok(ImageBounds { g_hat_sup: g_hat.values.amax(), image_sup, image_lipschitz: lip })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ClippedArKernel, FiniteKernel, MatrixFamily, Response, TwoStateFamily};
    use crate::mean_field::{find_root, AffineMap, RootOptions, StateTable};
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn random_chain(entries: &[f64], n: usize) -> DMatrix<f64> {
        let mut p = DMatrix::from_row_slice(n, n, entries);
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        p
    }

    #[test]
    fn constant_f_gives_zero() {
        let p = dmatrix![0.9, 0.1; 0.2, 0.8];
        let pi = stationary_distribution(&p).unwrap();
        let s = poisson_solve_exact(&p, &pi, &col(&[3.0, 3.0])).unwrap();
        assert!(s.values.amax() < 1e-15);
    }

    #[test]
    fn two_state_closed_form() {
        let p = dmatrix![0.5, 0.5; 0.5, 0.5];
        let pi = dvector![0.5, 0.5];
        let s = poisson_solve_exact(&p, &pi, &col(&[1.0, -1.0])).unwrap();
        assert_abs_diff_eq!(s.values[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.values[(1, 0)], -1.0, epsilon = 1e-14);

        // General two-state chain: g1 - g2 = (f1 - f2) / (a + b), centred under pi.
        let (a, b) = (0.1, 0.2);
        let p = dmatrix![1.0 - a, a; b, 1.0 - b];
        let pi = stationary_distribution(&p).unwrap();
        let s = poisson_solve_exact(&p, &pi, &col(&[1.0, -1.0])).unwrap();
        assert_abs_diff_eq!(s.values[(0, 0)] - s.values[(1, 0)], 2.0 / (a + b), epsilon = 1e-12);
        assert!(s.centering_residual < 1e-14);
    }

    #[test]
    fn series_depth_one_is_centred_f() {
        let p = dmatrix![0.9, 0.1; 0.2, 0.8];
        let pi = stationary_distribution(&p).unwrap();
        let s = poisson_series_matrix(&p, &pi, &col(&[1.0, -1.0]), 1).unwrap();
        assert_abs_diff_eq!(s.values[(0, 0)], 1.0 - 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.values[(1, 0)], -1.0 - 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_kernel_series_is_exact() {
        let k = FiniteKernel::new(TwoStateFamily::constant(0.5, 0.5));
        let f = |x: &usize, out: &mut [f64]| out[0] = if *x == 0 { 1.0 } else { -1.0 };
        let s = poisson_solve_series(&k, &[0.0], &f, 1, 50, &[], &RolloutBudget::default()).unwrap();
        assert!((s.values.clone() - col(&[1.0, -1.0])).amax() < 1e-12);
        assert!((s.values[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_bound_is_geometric() {
        let b1 = geometric_tail_bound(1.0, 0.5, 10).unwrap();
        let b2 = geometric_tail_bound(1.0, 0.5, 11).unwrap();
        let b20 = geometric_tail_bound(1.0, 0.5, 20).unwrap();
        assert_abs_diff_eq!(b2 / b1, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b20 / b1, 0.5f64.powi(10), epsilon = 1e-15);
        assert!(geometric_tail_bound(1.0, 0.0, 10).is_none());
    }

    #[test]
    fn non_contracting_estimate_is_flagged() {
        let k = ClippedArKernel::new(0.5, Response::Constant { value: 0.0 }, Response::Constant { value: 1.0 }, 4.0)
            .unwrap();
        let f = |x: &f64, out: &mut [f64]| out[0] = *x;
        let budget = RolloutBudget { rollouts: 10, stationary_steps: 100, seed: 1, rho_hat: Some(0.0) };
        let s = poisson_solve_series(&k, &[0.0], &f, 1, 5, &[1.0], &budget).unwrap();
        assert!(s.non_contracting && s.tail_bound.is_none());
    }

    #[test]
    fn continuous_series_matches_ar_closed_form() {
        // Unclipped AR(1) with mean 0: g_hat(x) = x / (1 - rho) for f(x) = x.
        let k = ClippedArKernel::new(0.5, Response::Constant { value: 0.0 }, Response::Constant { value: 0.5 }, 50.0)
            .unwrap();
        let f = |x: &f64, out: &mut [f64]| out[0] = *x;
        let budget = RolloutBudget { rollouts: 40_000, stationary_steps: 4_000_000, seed: 3, rho_hat: Some(0.5) };
        let s = poisson_solve_series(&k, &[0.0], &f, 1, 20, &[1.0, -2.0], &budget).unwrap();
        assert!((s.values[(0, 0)] - 2.0).abs() < 0.1, "{}", s.values);
        assert!((s.values[(1, 0)] + 4.0).abs() < 0.1, "{}", s.values);
        assert!(s.tail_bound.unwrap() < 1e-4);
    }

    #[test]
    fn apply_kernel_examples() {
        let k = FiniteKernel::new(TwoStateFamily::constant(0.1, 0.2));
        let c = |_: &usize, out: &mut [f64]| out[0] = 2.5;
        let ph = apply_kernel(&k, &[0.0], &c, 1, &[], 0, 0).unwrap();
        assert!((ph - col(&[2.5, 2.5])).amax() < 1e-15);
        let h = |x: &usize, out: &mut [f64]| out[0] = if *x == 0 { 1.0 } else { 0.0 };
        let ph = apply_kernel(&k, &[0.0], &h, 1, &[], 0, 0).unwrap();
        assert!((ph - col(&[0.9, 0.2])).amax() < 1e-15);

        let ar = ClippedArKernel::new(0.5, Response::Linear { base: 0.0, slope: 1.0 }, Response::Constant { value: 0.0 }, 2.0)
            .unwrap();
        let sq = |x: &f64, out: &mut [f64]| out[0] = x * x;
        let ph = apply_kernel(&ar, &[1.5], &sq, 1, &[1.0, 3.0], 5, 0).unwrap();
        assert_eq!(ph[(0, 0)], 4.0);
        assert_eq!(ph[(1, 0)], 4.0);
    }

    fn tanh_setup() -> (FiniteKernel<TwoStateFamily>, AffineMap<StateTable>, Vec<f64>) {
        // Bases chosen so the root is away from the inflection point of tanh.
        let k = FiniteKernel::new(TwoStateFamily::new(Response::tanh(0.4, 0.3), Response::tanh(0.5, -0.1)));
        let map = AffineMap::linear_hx(StateTable::scalar(&[1.0, -1.0]).unwrap());
        let root = find_root(&map, &k, &[0.0], &RootOptions::default()).unwrap();
        (k, map, root.theta_star)
    }

    #[test]
    fn decision_independent_family_has_zero_response() {
        let k = FiniteKernel::new(TwoStateFamily::constant(0.3, 0.6));
        let map = AffineMap::linear_hx(StateTable::scalar(&[1.0, -1.0]).unwrap());
        let (sol, _, _) = poisson_for_map(&map, &k, &[0.1]).unwrap();
        let op = gateaux_derivative(&k, &[0.1], &sol, None).unwrap();
        assert_eq!(op.lambda_bar.amax(), 0.0);
        let scan = wd_remainder_scan(&k, &[0.1], &sol, &op, &geometric_radii(0.1, 1e-4, 7), 0).unwrap();
        assert!(scan.exact && scan.fitted_exponent.is_none() && !scan.violation);
    }

    #[test]
    fn gateaux_matches_analytic_derivative() {
        let (k, map, ts) = tanh_setup();
        let (sol, _, pi) = poisson_for_map(&map, &k, &ts).unwrap();
        let op = gateaux_derivative(&k, &ts, &sol, None).unwrap();
        let t = ts[0];
        let sech2 = 1.0 / t.cosh().powi(2);
        let (da, db) = (0.3 * sech2, -0.1 * sech2);
        assert!(t.abs() > 0.05);
        let dp = dmatrix![-da, da; db, -db];
        let expected = dp * &sol.values;
        assert!((&op.lambda[0] - &expected).amax() < 1e-9, "{} vs {}", op.lambda[0], expected);
        assert!((op.lambda_bar[(0, 0)] - (pi.transpose() * expected)[(0, 0)]).abs() < 1e-9);
        assert!(op.suspect_directions.is_empty());

        let (l2, _) = gateaux_directional(&k, &ts, &sol.values, &[2.0], GATEAUX_STEPS).unwrap();
        assert!((l2 - &op.lambda[0] * 2.0).amax() < 1e-8);
    }

    #[test]
    fn smooth_family_has_quadratic_remainder() {
        let (k, map, ts) = tanh_setup();
        let (sol, _, _) = poisson_for_map(&map, &k, &ts).unwrap();
        let op = gateaux_derivative(&k, &ts, &sol, None).unwrap();
        let scan = wd_remainder_scan(&k, &ts, &sol, &op, &geometric_radii(1e-1, 1e-4, 13), 4).unwrap();
        let e = scan.fitted_exponent.unwrap();
        assert!((1.8..=2.2).contains(&e), "{e}");
        assert!(!scan.violation);
        assert!(scan.c_wd_hat > 0.0 && scan.c_wd_hat.is_finite());
    }

    #[test]
    fn kink_family_violates() {
        let k = FiniteKernel::new(TwoStateFamily::new(
            Response::Kink { base: 0.5, slope: 0.2, center: 0.0 },
            Response::Constant { value: 0.5 },
        ));
        let map = AffineMap::linear_hx(StateTable::scalar(&[1.0, -1.0]).unwrap());
        let (sol, _, _) = poisson_for_map(&map, &k, &[0.0]).unwrap();
        let op = gateaux_derivative(&k, &[0.0], &sol, None).unwrap();
        let scan = wd_remainder_scan(&k, &[0.0], &sol, &op, &geometric_radii(1e-1, 1e-4, 13), 4).unwrap();
        let e = scan.fitted_exponent.unwrap();
        assert!((0.8..=1.2).contains(&e), "{e}");
        assert!(scan.violation);
    }

    #[test]
    fn bias_operator_examples() {
        let z = DMatrix::zeros(2, 2);
        let i = DMatrix::identity(2, 2);
        let b = bias_operator(&z, &(-&i)).unwrap();
        assert_abs_diff_eq!(b.min_singular_value, 1.0, epsilon = 1e-14);
        assert!(b.invertible);
        let b = bias_operator(&i, &(-&i)).unwrap();
        assert_eq!(b.min_singular_value, 0.0);
        assert!(!b.invertible);
        assert!(bias_operator(&DMatrix::zeros(1, 1), &i).is_err());
    }

    #[test]
    fn image_bounds_are_finite() {
        let (k, map, ts) = tanh_setup();
        let (sol, _, _) = poisson_for_map(&map, &k, &ts).unwrap();
        let grid: Vec<Vec<f64>> = (-5..=5).map(|i| vec![i as f64 * 0.4]).collect();
        let b = image_bounds(&k, &sol, &grid).unwrap();
        assert!(b.g_hat_sup.is_finite() && b.image_sup.is_finite() && b.image_lipschitz.is_finite());
    }

    #[test]
    fn matrix_family_series_agrees_with_exact() {
        let p = random_chain(&[1.0, 2.0, 3.0, 4.0, 1.0, 1.0, 2.0, 2.0, 5.0], 3);
        let k = FiniteKernel::new(MatrixFamily::constant(p.clone()));
        let f = |x: &usize, out: &mut [f64]| out[0] = (*x as f64).powi(2);
        let series = poisson_solve_series(&k, &[0.0], &f, 1, 200, &[2, 0], &RolloutBudget::default()).unwrap();
        let pi = stationary_distribution(&p).unwrap();
        let exact = poisson_solve_exact(&p, &pi, &col(&[0.0, 1.0, 4.0])).unwrap();
        assert!((series.values[(0, 0)] - exact.values[(2, 0)]).abs() < 1e-8);
        assert!((series.values[(1, 0)] - exact.values[(0, 0)]).abs() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn poisson_residuals_and_series_agreement(
            entries in prop::collection::vec(0.05f64..1.0, 25),
            f in prop::collection::vec(-3.0f64..3.0, 5),
        ) {
            let p = random_chain(&entries, 5);
            let pi = stationary_distribution(&p).unwrap();
            let exact = poisson_solve_exact(&p, &pi, &col(&f)).unwrap();
            prop_assert!(exact.equation_residual <= EXACT_TOL);
            prop_assert!(exact.centering_residual <= EXACT_TOL);
            let series = poisson_series_matrix(&p, &pi, &col(&f), 200).unwrap();
            prop_assert!((&series.values - &exact.values).amax() <= 1e-8);
        }

        #[test]
        fn gateaux_is_linear(u in -2.0f64..2.0, v in -2.0f64..2.0) {
            let k = FiniteKernel::new(TwoStateFamily {
                a: Response::tanh(0.5, 0.3),
                b: Response::tanh(0.5, -0.1),
                weights: vec![1.0, -0.5],
            });
            struct TwoD;
            impl UpdateMap<usize> for TwoD {
                fn dim(&self) -> usize { 2 }
                fn eval(&self, t: &[f64], x: &usize, out: &mut [f64]) {
                    out[0] = -t[0] + if *x == 0 { 1.0 } else { -1.0 };
                    out[1] = -t[1] + *x as f64;
                }
            }
            let ts = [0.2, -0.1];
            let (sol, _, _) = poisson_for_map(&TwoD, &k, &ts).unwrap();
            let op = gateaux_derivative(&k, &ts, &sol, None).unwrap();
            let (lu, _) = gateaux_directional(&k, &ts, &sol.values, &[u, v], GATEAUX_STEPS).unwrap();
            prop_assert!((lu - op.apply(&[u, v])).amax() <= 1e-8);
        }
    }
}

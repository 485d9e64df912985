//! Update maps `g(theta, x)`, the mean field `gbar(theta) = E_{pi_theta}[g(theta, X)]`,
//! its root `theta*` and the Jacobian at the root.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_finite, Error, Result};
use crate::kernels::{stationary_distribution, ControlledKernel};
use crate::linalg::{dot, max_sym_eigenvalue, norm};
use crate::rng::{stream, DrawBuffer};

/// Optional constants supplied with a map; used to pick step sizes, never estimated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MapHints {
    pub lipschitz: Option<f64>,
    pub monotonicity: Option<f64>,
}

/// `g : R^d x X -> R^d`.
pub trait UpdateMap<S>: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, theta: &[f64], x: &S, out: &mut [f64]);

    /// `d g / d theta` at `(theta, x)`; central differences unless overridden.
    fn jacobian(&self, theta: &[f64], x: &S) -> DMatrix<f64> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        let (mut gp, mut gm) = (vec![0.0; d], vec![0.0; d]);
        for j in 0..d {
            let h = 1e-6 * (1.0 + theta[j].abs());
            tp[j] = theta[j] + h;
            tm[j] = theta[j] - h;
            self.eval(&tp, x, &mut gp);
            self.eval(&tm, x, &mut gm);
            for i in 0..d {
                jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
            tp[j] = theta[j];
            tm[j] = theta[j];
        }
        jac
    }

    /// True when `g` is affine in `theta` (so `g'' = 0`).
    fn is_affine(&self) -> bool {
        false
    }

    fn hints(&self) -> MapHints {
        MapHints::default()
    }
}

/// Vector-valued observable `h(x)` on a state space.
pub trait Observable<S>: Send + Sync {
    fn dim(&self) -> usize;
    fn write(&self, x: &S, out: &mut [f64]);
}

/// Observable on a finite space given by one row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTable {
    rows: Vec<Vec<f64>>,
}

impl StateTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::config("h", "table needs at least one state and one component"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::config(format!("h[{i}]"), format!("expected {d} components")));
            }
            check_finite(&format!("h[{i}]"), r)?;
        }
        Ok(StateTable { rows })
    }

    /// Scalar observable, one value per state.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|v| vec![*v]).collect())
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.rows[x]
    }
}

impl Observable<usize> for StateTable {
    fn dim(&self) -> usize {
        self.rows[0].len()
    }

    #[inline]
    fn write(&self, x: &usize, out: &mut [f64]) {
        out.copy_from_slice(&self.rows[*x]);
    }
}

/// `h(x) = x` on real or vector states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identity {
    pub dim: usize,
}

impl Observable<f64> for Identity {
    fn dim(&self) -> usize {
        1
    }

    fn write(&self, x: &f64, out: &mut [f64]) {
        out[0] = *x;
    }
}

impl Observable<Vec<f64>> for Identity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn write(&self, x: &Vec<f64>, out: &mut [f64]) {
        out.copy_from_slice(x);
    }
}

/// `g(theta, x) = A theta + h(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap<O> {
    a: DMatrix<f64>,
    h: O,
}

impl<O> AffineMap<O> {
    pub fn new<S>(a: DMatrix<f64>, h: O) -> Result<Self>
    where
        O: Observable<S>,
    {
        if a.nrows() != a.ncols() || a.nrows() != h.dim() {
            return Err(Error::DimensionMismatch { expected: h.dim(), got: a.nrows() });
        }
        Ok(AffineMap { a, h })
    }

    /// `g(theta, x) = -theta + h(x)`.
    pub fn linear_hx<S>(h: O) -> Self
    where
        O: Observable<S>,
    {
        let d = h.dim();
        AffineMap { a: -DMatrix::identity(d, d), h }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl<S, O: Observable<S>> UpdateMap<S> for AffineMap<O> {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    #[inline]
    fn eval(&self, theta: &[f64], x: &S, out: &mut [f64]) {
        self.h.write(x, out);
        let d = out.len();
        if d == 1 {
            out[0] += self.a[(0, 0)] * theta[0];
            return;
        }
        for i in 0..d {
            for j in 0..d {
                out[i] += self.a[(i, j)] * theta[j];
            }
        }
    }

    fn jacobian(&self, _theta: &[f64], _x: &S) -> DMatrix<f64> {
        self.a.clone()
    }

    fn is_affine(&self) -> bool {
        true
    }

    fn hints(&self) -> MapHints {
        let lipschitz = self.a.clone().singular_values().max();
        let mono = -max_sym_eigenvalue(&self.a);
        MapHints { lipschitz: Some(lipschitz), monotonicity: (mono > 0.0).then_some(mono) }
    }
}

/// Scalar map `g(theta, x) = h(x) - kappa(x) theta - gamma tanh(theta / scale)`.
///
/// The state-dependent slope `kappa(x)` and the saturating term make the
/// stationary bias of the decision-dependent recursion non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarTanhMix<O> {
    h: O,
    kappa: O,
    gamma: f64,
    scale: f64,
}

impl<O> ScalarTanhMix<O> {
    pub fn new<S>(h: O, kappa: O, gamma: f64, scale: f64) -> Result<Self>
    where
        O: Observable<S>,
    {
        if h.dim() != 1 || kappa.dim() != 1 {
            return Err(Error::config("h", "scalar_tanh_mix needs scalar h and kappa"));
        }
        if !(scale > 0.0) {
            return Err(Error::config("scale", format!("must be positive, got {scale}")));
        }
        if !(gamma >= 0.0) {
            return Err(Error::config("gamma", format!("must be non-negative, got {gamma}")));
        }
        Ok(ScalarTanhMix { h, kappa, gamma, scale })
    }
}

impl<S, O: Observable<S>> UpdateMap<S> for ScalarTanhMix<O> {
    fn dim(&self) -> usize {
        1
    }

    #[inline]
    fn eval(&self, theta: &[f64], x: &S, out: &mut [f64]) {
        let mut h = [0.0];
        let mut k = [0.0];
        self.h.write(x, &mut h);
        self.kappa.write(x, &mut k);
        out[0] = h[0] - k[0] * theta[0] - self.gamma * (theta[0] / self.scale).tanh();
    }

    fn jacobian(&self, theta: &[f64], x: &S) -> DMatrix<f64> {
        let mut k = [0.0];
        self.kappa.write(x, &mut k);
        let c = (theta[0] / self.scale).cosh();
        DMatrix::from_element(1, 1, -k[0] - self.gamma / (self.scale * c * c))
    }
}

/// Scalar map given by values `g(theta_i, x)` on a grid, linear in between and
/// linearly extrapolated beyond the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct TableMap {
    grid: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl TableMap {
    /// `values[x][i] = g(grid[i], x)`.
    pub fn new(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::config("grid", "need at least two grid points"));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("grid", "grid must be strictly increasing"));
        }
        if values.is_empty() {
            return Err(Error::config("values", "need one row per state"));
        }
        for (x, row) in values.iter().enumerate() {
            if row.len() != grid.len() {
                return Err(Error::config(format!("values[{x}]"), format!("expected {} entries", grid.len())));
            }
            check_finite(&format!("values[{x}]"), row)?;
        }
        Ok(TableMap { grid, values })
    }

    pub fn n_states(&self) -> usize {
        self.values.len()
    }

    fn interpolate(&self, t: f64, row: &[f64]) -> f64 {
        let n = self.grid.len();
        let i = match self.grid.partition_point(|g| *g <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        row[i] + (row[i + 1] - row[i]) * (t - t0) / (t1 - t0)
    }
}

impl UpdateMap<usize> for TableMap {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, theta: &[f64], x: &usize, out: &mut [f64]) {
        out[0] = self.interpolate(theta[0], &self.values[*x]);
    }
}

/// Monte Carlo settings for mean fields of continuous kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McBudget {
    /// Post-burn-in steps of the frozen-`theta` chain.
    pub steps: u64,
    pub burn_in: u64,
    pub seed: u64,
}

impl Default for McBudget {
    fn default() -> Self {
        McBudget { steps: 200_000, burn_in: 2_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RootMethod {
    /// Exact stationary law of a finite kernel.
    ExactPi,
    /// Long-run average along a frozen chain.
    McPi,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanFieldValue {
    pub value: Vec<f64>,
    /// Batch-means standard error; `None` on the exact path.
    pub std_error: Option<Vec<f64>>,
    pub method: RootMethod,
}

/// Exact stationary law `(states, pi_theta)` for finite kernels.
pub fn stationary_law<K: ControlledKernel>(
    kernel: &K,
    theta: &[f64],
) -> Option<Result<(Vec<K::State>, DVector<f64>)>> {
    let states = kernel.states()?;
    let p = kernel.transition_matrix(theta)?;
    Some(p.and_then(|p| stationary_distribution(&p)).map(|pi| (states, pi)))
}

/// `gbar(theta)`: exact on finite kernels, long-run average otherwise.
pub fn mean_field_eval<S, K, M>(map: &M, kernel: &K, theta: &[f64], budget: &McBudget) -> Result<MeanFieldValue>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    check_finite("theta", theta)?;
    let d = map.dim();
    if theta.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta.len() });
    }
    if let Some(law) = stationary_law(kernel, theta) {
        let (states, pi) = law?;
        let mut value = vec![0.0; d];
        let mut g = vec![0.0; d];
        for (x, p) in states.iter().zip(pi.iter()) {
            map.eval(theta, x, &mut g);
            for i in 0..d {
                value[i] += p * g[i];
            }
        }
        return Ok(MeanFieldValue { value, std_error: None, method: RootMethod::ExactPi });
    }
    if budget.steps == 0 {
        return Err(Error::config("budget", "budget must be positive"));
    }
    let batches = 20u64.min(budget.steps);
    let per_batch = budget.steps / batches;
    let mut rng = stream(budget.seed, 0);
    let mut buf = DrawBuffer::new(kernel.draw_spec(), 0);
    let mut x = kernel.initial_state();
    for _ in 0..budget.burn_in {
        buf.fill(&mut rng);
        x = kernel.sample_next(theta, &x, buf.kernel())?;
    }
    let mut g = vec![0.0; d];
    let mut batch_means = Vec::with_capacity(batches as usize);
    for _ in 0..batches {
        let mut sum = vec![0.0; d];
        for _ in 0..per_batch {
            buf.fill(&mut rng);
            x = kernel.sample_next(theta, &x, buf.kernel())?;
            map.eval(theta, &x, &mut g);
            for i in 0..d {
                sum[i] += g[i];
            }
        }
        batch_means.push(sum.into_iter().map(|s| s / per_batch as f64).collect::<Vec<_>>());
    }
    let nb = batch_means.len() as f64;
    let value: Vec<f64> = (0..d).map(|i| batch_means.iter().map(|b| b[i]).sum::<f64>() / nb).collect();
    let std_error = (0..d)
        .map(|i| {
            let var = batch_means.iter().map(|b| (b[i] - value[i]).powi(2)).sum::<f64>() / (nb - 1.0).max(1.0);
            (var / nb).sqrt()
        })
        .collect();
    Ok(MeanFieldValue { value, std_error: Some(std_error), method: RootMethod::McPi })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianEstimate {
    pub matrix: DMatrix<f64>,
    /// Max-entry gap between the refined and the half-step difference.
    pub error_estimate: f64,
    pub step: f64,
}

/// `gbar'(theta)` by central differences of the mean field with one Richardson level.
pub fn jacobian_at<S, K, M>(
    map: &M,
    kernel: &K,
    theta: &[f64],
    fd_step: Option<f64>,
    budget: &McBudget,
) -> Result<JacobianEstimate>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    let d = map.dim();
    let h = fd_step.unwrap_or(1e-4 * (1.0 + norm(theta)));
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config("fd_step", format!("step must be positive, got {h}")));
    }
    let central = |j: usize, t: f64| -> Result<Vec<f64>> {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[j] += t;
        tm[j] -= t;
        let gp = mean_field_eval(map, kernel, &tp, budget)?.value;
        let gm = mean_field_eval(map, kernel, &tm, budget)?.value;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * t)).collect())
    };
    let mut matrix = DMatrix::zeros(d, d);
    let mut error_estimate: f64 = 0.0;
    for j in 0..d {
        let coarse = central(j, h)?;
        let fine = central(j, h / 2.0)?;
        for i in 0..d {
            let refined = (4.0 * fine[i] - coarse[i]) / 3.0;
            matrix[(i, j)] = refined;
            error_estimate = error_estimate.max((refined - fine[i]).abs());
        }
    }
    Ok(JacobianEstimate { matrix, error_estimate, step: h })
}

/// `E_{pi_theta}[d g / d theta (theta, X)]`: the Jacobian with the law held fixed.
///
/// The total derivative returned by [`jacobian_at`] equals this plus the
/// kernel-response part `E_pi[Lambda[.]]`.
pub fn partial_jacobian<S, K, M>(map: &M, kernel: &K, theta: &[f64], budget: &McBudget) -> Result<DMatrix<f64>>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    let d = map.dim();
    let mut out = DMatrix::zeros(d, d);
    if let Some(law) = stationary_law(kernel, theta) {
        let (states, pi) = law?;
        for (x, p) in states.iter().zip(pi.iter()) {
            out += map.jacobian(theta, x) * *p;
        }
        return Ok(out);
    }
    if budget.steps == 0 {
        return Err(Error::config("budget", "budget must be positive"));
    }
    let mut rng = stream(budget.seed, 0);
    let mut buf = DrawBuffer::new(kernel.draw_spec(), 0);
    let mut x = kernel.initial_state();
    for _ in 0..budget.burn_in {
        buf.fill(&mut rng);
        x = kernel.sample_next(theta, &x, buf.kernel())?;
    }
    for _ in 0..budget.steps {
        buf.fill(&mut rng);
        x = kernel.sample_next(theta, &x, buf.kernel())?;
        out += map.jacobian(theta, &x);
    }
    Ok(out / budget.steps as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootOptions {
    /// Defaults to `1e-10` on the exact path and `1e-4` on the Monte Carlo path.
    pub tol: Option<f64>,
    pub max_iters: usize,
    /// Fixed damping `eta`; otherwise `mu / L1^2` from hints, else backtracking.
    pub step: Option<f64>,
    pub budget: McBudget,
    pub fd_step: Option<f64>,
}

impl Default for RootOptions {
    fn default() -> Self {
        RootOptions { tol: None, max_iters: 10_000, step: None, budget: McBudget::default(), fd_step: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootCertificate {
    pub theta_star: Vec<f64>,
    pub residual: f64,
    pub jacobian: DMatrix<f64>,
    pub jacobian_error: f64,
    pub method: RootMethod,
    pub iterations: usize,
}

/// Damped mean-field iteration `theta <- theta + eta gbar(theta)`.
///
/// With a fixed or hinted `eta` every step is taken; otherwise `eta` is
/// halved until `|gbar|` decreases and grown again after each accepted step.
/// Monte Carlo evaluations reuse one seed so the iteration is deterministic.
pub fn find_root<S, K, M>(map: &M, kernel: &K, theta0: &[f64], opts: &RootOptions) -> Result<RootCertificate>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    let eval = |t: &[f64]| mean_field_eval(map, kernel, t, &opts.budget);
    let mut theta = theta0.to_vec();
    let first = eval(&theta)?;
    let method = first.method;
    let tol = opts.tol.unwrap_or(match method {
        RootMethod::ExactPi => 1e-10,
        RootMethod::McPi => 1e-4,
    });
    let hints = map.hints();
    let fixed = opts.step.or(match (hints.monotonicity, hints.lipschitz) {
        (Some(mu), Some(l)) if mu > 0.0 && l > 0.0 => Some(mu / (l * l)),
        _ => None,
    });
    if let Some(eta) = fixed {
        if !(eta > 0.0) {
            return Err(Error::config("step", format!("damping must be positive, got {eta}")));
        }
    }
    let mut g = first.value;
    let mut res = norm(&g);
    let mut eta = fixed.unwrap_or(1.0);
    let mut iterations = 0;
    while res > tol {
        if iterations >= opts.max_iters {
            return Err(Error::NonConvergence { iterations, residual: res });
        }
        iterations += 1;
        let candidate: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t + eta * gi).collect();
        let g_new = eval(&candidate)?.value;
        let res_new = norm(&g_new);
        if fixed.is_some() || res_new < res {
            theta = candidate;
            g = g_new;
            res = res_new;
            if fixed.is_none() {
                eta = (eta * 2.0).min(1.0);
            }
        } else {
            eta *= 0.5;
            if eta < 1e-14 {
                return Err(Error::NonConvergence { iterations, residual: res });
            }
        }
        if !res.is_finite() {
            return Err(Error::NonConvergence { iterations, residual: res });
        }
    }
    let jac = jacobian_at(map, kernel, &theta, opts.fd_step, &opts.budget)?;
    Ok(RootCertificate {
        theta_star: theta,
        residual: res,
        jacobian: jac.matrix,
        jacobian_error: jac.error_estimate,
        method,
        iterations,
    })
}

/// Smallest observed `-<t - t', G(t, x) - G(t', x)> / |t - t'|^2` over pairs
/// of grid points and all states, where `G(t, x) = E_{P_t(x, .)}[g(t, X)]`
/// is the one-step conditional mean. Finite kernels only.
pub fn estimate_conditional_monotonicity<S, K, M>(map: &M, kernel: &K, grid: &[Vec<f64>]) -> Result<f64>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    let states = kernel
        .states()
        .ok_or_else(|| Error::Unsupported("conditional monotonicity needs a finite kernel".into()))?;
    if grid.len() < 2 {
        return Err(Error::config("grid", "need at least two grid points"));
    }
    let d = map.dim();
    let mut g = vec![0.0; d];
    // cond[t][x] = G(grid[t], x)
    let mut cond = Vec::with_capacity(grid.len());
    for t in grid {
        let p = kernel.transition_matrix(t).expect("finite kernel")?;
        let gs: Vec<Vec<f64>> = states
            .iter()
            .map(|y| {
                map.eval(t, y, &mut g);
                g.clone()
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..states.len())
            .map(|x| (0..d).map(|i| (0..states.len()).map(|y| p[(x, y)] * gs[y][i]).sum()).collect())
            .collect();
        cond.push(rows);
    }
    let mut best = f64::INFINITY;
    for a in 0..grid.len() {
        for b in a + 1..grid.len() {
            let dt: Vec<f64> = grid[a].iter().zip(&grid[b]).map(|(u, v)| u - v).collect();
            let n2 = dot(&dt, &dt);
            if n2 == 0.0 {
                continue;
            }
            for x in 0..states.len() {
                let dg: Vec<f64> = cond[a][x].iter().zip(&cond[b][x]).map(|(u, v)| u - v).collect();
                best = best.min(-dot(&dt, &dg) / n2);
            }
        }
    }
    Ok(best)
}

/// Smallest observed `-<t - t', gbar(t) - gbar(t')> / |t - t'|^2` over grid pairs.
pub fn estimate_monotonicity<S, K, M>(map: &M, kernel: &K, grid: &[Vec<f64>], budget: &McBudget) -> Result<f64>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
{
    if grid.len() < 2 {
        return Err(Error::config("grid", "need at least two grid points"));
    }
    let values: Vec<Vec<f64>> =
        grid.iter().map(|t| mean_field_eval(map, kernel, t, budget).map(|v| v.value)).collect::<Result<_>>()?;
    let mut best = f64::INFINITY;
    for a in 0..grid.len() {
        for b in a + 1..grid.len() {
            let dt: Vec<f64> = grid[a].iter().zip(&grid[b]).map(|(u, v)| u - v).collect();
            let dg: Vec<f64> = values[a].iter().zip(&values[b]).map(|(u, v)| u - v).collect();
            let n2 = dot(&dt, &dt);
            if n2 > 0.0 {
                best = best.min(-dot(&dt, &dg) / n2);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ClippedArKernel, FiniteKernel, MatrixFamily, Response, TwoStateFamily};
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn pm_one() -> StateTable {
        StateTable::scalar(&[1.0, -1.0]).unwrap()
    }

    fn tanh_kernel() -> FiniteKernel<TwoStateFamily> {
        FiniteKernel::new(TwoStateFamily::new(Response::tanh(0.5, 0.2), Response::tanh(0.5, -0.2)))
    }

    /// Bisection oracle for `theta = (b - a) / (a + b)` with the tanh family.
    fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn state_free_map_gives_minus_theta() {
        let map = AffineMap::linear_hx(StateTable::scalar(&[0.0, 0.0]).unwrap());
        let k = FiniteKernel::new(TwoStateFamily::constant(0.1, 0.2));
        let v = mean_field_eval(&map, &k, &[0.7], &McBudget::default()).unwrap();
        assert_eq!(v.value, vec![-0.7]);
        assert_eq!(v.method, RootMethod::ExactPi);
    }

    #[test]
    fn two_state_mean_field_and_root() {
        let map = AffineMap::linear_hx(pm_one());
        let k = FiniteKernel::new(TwoStateFamily::constant(0.1, 0.2));
        let v = mean_field_eval(&map, &k, &[0.25], &McBudget::default()).unwrap();
        assert_abs_diff_eq!(v.value[0], -0.25 + 1.0 / 3.0, epsilon = 1e-14);
        let root = find_root(&map, &k, &[0.0], &RootOptions::default()).unwrap();
        assert_abs_diff_eq!(root.theta_star[0], 1.0 / 3.0, epsilon = 1e-10);
        assert!(root.residual <= 1e-10);
        assert_abs_diff_eq!(root.jacobian[(0, 0)], -1.0, epsilon = 1e-8);
    }

    #[test]
    fn zero_budget_on_continuous_kernel_is_an_error() {
        let k = ClippedArKernel::new(0.5, Response::Constant { value: 0.0 }, Response::Constant { value: 1.0 }, 5.0)
            .unwrap();
        let map = AffineMap::linear_hx::<f64>(Identity { dim: 1 });
        let budget = McBudget { steps: 0, ..McBudget::default() };
        let err = mean_field_eval(&map, &k, &[0.0], &budget).unwrap_err();
        assert!(err.to_string().contains("budget must be positive"));
    }

    #[test]
    fn decision_dependent_root_matches_bisection() {
        let a = |t: f64| 0.5 + 0.2 * t.tanh();
        let b = |t: f64| 0.5 - 0.2 * t.tanh();
        let oracle = bisect_root(|t| (b(t) - a(t)) / (a(t) + b(t)) - t, -1.0, 1.0);
        let root = find_root(&AffineMap::linear_hx(pm_one()), &tanh_kernel(), &[0.5], &RootOptions::default()).unwrap();
        assert_abs_diff_eq!(root.theta_star[0], oracle, epsilon = 1e-9);

        // J* = -1 + d/dt[(b - a) / (a + b)] = -1 - 0.4 sech^2(t) at the root (a + b = 1).
        let t = oracle;
        let expected = -1.0 - 0.4 / t.cosh().powi(2);
        assert_abs_diff_eq!(root.jacobian[(0, 0)], expected, epsilon = 1e-8);
    }

    #[test]
    fn jacobian_step_halving_is_consistent() {
        let map = AffineMap::linear_hx(pm_one());
        let k = tanh_kernel();
        let j1 = jacobian_at(&map, &k, &[0.3], Some(1e-4), &McBudget::default()).unwrap();
        let j2 = jacobian_at(&map, &k, &[0.3], Some(5e-5), &McBudget::default()).unwrap();
        let gap = (j1.matrix[(0, 0)] - j2.matrix[(0, 0)]).abs();
        assert!(gap <= j1.error_estimate.max(j2.error_estimate) + 1e-9, "{gap}");
        assert!(jacobian_at(&map, &k, &[0.3], Some(0.0), &McBudget::default()).is_err());
    }

    #[test]
    fn total_jacobian_splits_into_partial_plus_kernel_response() {
        let map = ScalarTanhMix::new(
            StateTable::scalar(&[4.0, -2.0]).unwrap(),
            StateTable::scalar(&[1.0, 0.5]).unwrap(),
            1.0,
            0.2,
        )
        .unwrap();
        let k = tanh_kernel();
        let t = 0.1;
        let total = jacobian_at(&map, &k, &[t], None, &McBudget::default()).unwrap().matrix[(0, 0)];
        let partial = partial_jacobian(&map, &k, &[t], &McBudget::default()).unwrap()[(0, 0)];
        // Stationary law is (1 - a, a) since rows coincide; kernel part is a'(t) (g(t,1) - g(t,0)).
        let gvals: Vec<f64> = (0..2)
            .map(|x| {
                let mut o = [0.0];
                map.eval(&[t], &x, &mut o);
                o[0]
            })
            .collect();
        let da = 0.2 / t.cosh().powi(2);
        assert_abs_diff_eq!(total, partial + da * (gvals[1] - gvals[0]), epsilon = 1e-7);
    }

    #[test]
    fn table_map_interpolates_and_extrapolates() {
        let m = TableMap::new(vec![0.0, 1.0, 2.0], vec![vec![0.0, 1.0, 4.0]]).unwrap();
        let mut o = [0.0];
        m.eval(&[0.5], &0, &mut o);
        assert_eq!(o[0], 0.5);
        m.eval(&[1.5], &0, &mut o);
        assert_eq!(o[0], 2.5);
        m.eval(&[3.0], &0, &mut o);
        assert_eq!(o[0], 7.0);
        m.eval(&[-1.0], &0, &mut o);
        assert_eq!(o[0], -1.0);
        assert!(TableMap::new(vec![0.0, 0.0], vec![vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn monotonicity_on_shipped_style_problem() {
        let map = AffineMap::linear_hx(pm_one());
        let k = tanh_kernel();
        let grid: Vec<Vec<f64>> = (-10..=10).map(|i| vec![i as f64 * 0.2]).collect();
        let mu = estimate_monotonicity(&map, &k, &grid, &McBudget::default()).unwrap();
        assert!(mu > 0.0);
        let mu_c = estimate_conditional_monotonicity(&map, &k, &grid).unwrap();
        assert!(mu_c > 0.0 && mu_c <= mu + 1e-12);
    }

    #[test]
    fn mc_mean_field_on_clipped_chain() {
        // sigma = 0, rho = 0.5, m = 1: the chain settles at x = 2 and g = -theta + x.
        let k = ClippedArKernel::new(0.5, Response::Constant { value: 1.0 }, Response::Constant { value: 0.0 }, 5.0)
            .unwrap();
        let map = AffineMap::linear_hx::<f64>(Identity { dim: 1 });
        let v = mean_field_eval(&map, &k, &[0.5], &McBudget { steps: 1000, burn_in: 200, seed: 1 }).unwrap();
        assert_abs_diff_eq!(v.value[0], 1.5, epsilon = 1e-12);
        assert_eq!(v.method, RootMethod::McPi);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fd_jacobian_matches_linear_map(entries in prop::collection::vec(-1.0f64..1.0, 9)) {
            let mut a = DMatrix::from_row_slice(3, 3, &entries);
            // Shift so that the spectral abscissa is negative.
            let shift = a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            a -= DMatrix::identity(3, 3) * (shift.max(0.0) + 0.5);
            let h = StateTable::new(vec![vec![1.0, 0.0, 2.0], vec![-1.0, 0.5, 0.0]]).unwrap();
            let map = AffineMap::new(a.clone(), h).unwrap();
            let k = FiniteKernel::new(MatrixFamily::constant(dmatrix![0.7, 0.3; 0.4, 0.6]));
            let j = jacobian_at(&map, &k, &[0.1, -0.2, 0.3], None, &McBudget::default()).unwrap();
            prop_assert!((j.matrix - a).amax() < 1e-8);
        }
    }
}

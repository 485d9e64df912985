//! Finite-state controlled kernels with exact matrices and stationary laws.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{project, ControlledKernel, Response};
use crate::error::{check_finite, Error, Result};
use crate::rng::{DrawSpec, Draws};

/// Row sums must be within this distance of one.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// A finite family `theta -> P_theta` given row by row.
pub trait FiniteFamily: Send + Sync {
    fn n_states(&self) -> usize;

    /// Writes row `x` of `P_theta` into `row` (length `n_states`).
    fn fill_row(&self, theta: &[f64], x: usize, row: &mut [f64]);

    /// Inverse-CDF draw from row `x` with uniform `u`.
    fn sample_index(&self, theta: &[f64], x: usize, u: f64) -> Result<usize> {
        let n = self.n_states();
        let mut stack = [0.0f64; 16];
        let mut heap;
        let row: &mut [f64] = if n <= stack.len() {
            &mut stack[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        self.fill_row(theta, x, row);
        inverse_cdf(row, x, u)
    }
}

fn row_error(x: usize, msg: String) -> Error {
    Error::config(format!("row[{x}]"), msg)
}

fn check_row(row: &[f64], x: usize) -> Result<f64> {
    let mut sum = 0.0;
    for (j, &p) in row.iter().enumerate() {
        if !(p >= 0.0) {
            return Err(row_error(x, format!("entry {j} is {p}, expected a probability")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(row_error(x, format!("row sums to {sum:.17}, not 1")));
    }
    Ok(sum)
}

#[inline]
fn inverse_cdf(row: &[f64], x: usize, u: f64) -> Result<usize> {
    check_row(row, x)?;
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (j, &p) in row.iter().enumerate() {
        cum += p;
        if p > 0.0 {
            last_positive = j;
        }
        if u < cum {
            return Ok(j);
        }
    }
    Ok(last_positive)
}

/// Two-state family with `P_theta = [[1-a, a], [b, 1-b]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStateFamily {
    pub a: Response,
    pub b: Response,
    /// Projection weights; empty means `theta[0]`.
    pub weights: Vec<f64>,
}

impl TwoStateFamily {
    pub fn new(a: Response, b: Response) -> Self {
        TwoStateFamily { a, b, weights: Vec::new() }
    }

    /// Fixed `a`, `b`: the decision-independent control.
    pub fn constant(a: f64, b: f64) -> Self {
        Self::new(Response::Constant { value: a }, Response::Constant { value: b })
    }

    pub fn is_decision_independent(&self) -> bool {
        self.a.is_constant() && self.b.is_constant()
    }

    #[inline]
    fn flip(&self, theta: &[f64], x: usize) -> f64 {
        let s = project(&self.weights, theta);
        if x == 0 {
            self.a.eval(s)
        } else {
            self.b.eval(s)
        }
    }
}

impl FiniteFamily for TwoStateFamily {
    fn n_states(&self) -> usize {
        2
    }

    fn fill_row(&self, theta: &[f64], x: usize, row: &mut [f64]) {
        let p = self.flip(theta, x);
        if x == 0 {
            row[0] = 1.0 - p;
            row[1] = p;
        } else {
            row[0] = p;
            row[1] = 1.0 - p;
        }
    }

    #[inline]
    fn sample_index(&self, theta: &[f64], x: usize, u: f64) -> Result<usize> {
        let p = self.flip(theta, x);
        if !(0.0..=1.0).contains(&p) {
            let name = if x == 0 { "a" } else { "b" };
            return Err(Error::config(name, format!("switch probability {p} outside [0, 1]")));
        }
        // Row x is (stay, switch) up to ordering; inverse CDF over (P[x][0], P[x][1]).
        let first = if x == 0 { 1.0 - p } else { p };
        Ok(if u < first { 0 } else { 1 })
    }
}

type RowBuilder = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Family given by an arbitrary matrix-valued builder.
#[derive(Clone)]
pub struct MatrixFamily {
    n: usize,
    builder: Arc<RowBuilder>,
}

impl MatrixFamily {
    pub fn new(n: usize, builder: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        MatrixFamily { n, builder: Arc::new(builder) }
    }

    pub fn constant(p: DMatrix<f64>) -> Self {
        let n = p.nrows();
        Self::new(n, move |_| p.clone())
    }
}

impl fmt::Debug for MatrixFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatrixFamily").field("n", &self.n).finish_non_exhaustive()
    }
}

impl FiniteFamily for MatrixFamily {
    fn n_states(&self) -> usize {
        self.n
    }

    fn fill_row(&self, theta: &[f64], x: usize, row: &mut [f64]) {
        let m = (self.builder)(theta);
        for (j, r) in row.iter_mut().enumerate() {
            *r = m[(x, j)];
        }
    }
}

/// Metric on a finite state space.
#[derive(Debug, Clone, PartialEq)]
pub enum StateMetric {
    /// 1 off the diagonal.
    Discrete,
    Matrix(DMatrix<f64>),
}

impl StateMetric {
    /// Validates symmetry, zero diagonal, non-negativity and the triangle inequality.
    pub fn matrix(d: DMatrix<f64>) -> Result<Self> {
        let n = d.nrows();
        if d.ncols() != n {
            return Err(Error::config("state_metric", "metric must be square"));
        }
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(Error::config("state_metric", format!("diagonal entry {i} is not zero")));
            }
            for j in 0..n {
                if d[(i, j)] < 0.0 || (d[(i, j)] - d[(j, i)]).abs() > 1e-12 {
                    return Err(Error::config("state_metric", format!("entry ({i},{j}) breaks symmetry or sign")));
                }
                for k in 0..n {
                    if d[(i, k)] > d[(i, j)] + d[(j, k)] + 1e-12 {
                        return Err(Error::config(
                            "state_metric",
                            format!("triangle inequality fails on ({i},{j},{k})"),
                        ));
                    }
                }
            }
        }
        Ok(StateMetric::Matrix(d))
    }

    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        match self {
            StateMetric::Discrete => {
                if i == j {
                    0.0
                } else {
                    1.0
                }
            }
            StateMetric::Matrix(d) => d[(i, j)],
        }
    }
}

/// Finite controlled kernel: a family plus a state metric.
#[derive(Debug, Clone)]
pub struct FiniteKernel<F> {
    family: F,
    metric: StateMetric,
}

impl<F: FiniteFamily> FiniteKernel<F> {
    pub fn new(family: F) -> Self {
        FiniteKernel { family, metric: StateMetric::Discrete }
    }

    pub fn with_metric(family: F, metric: StateMetric) -> Result<Self> {
        if let StateMetric::Matrix(d) = &metric {
            if d.nrows() != family.n_states() {
                return Err(Error::DimensionMismatch { expected: family.n_states(), got: d.nrows() });
            }
        }
        Ok(FiniteKernel { family, metric })
    }

    pub fn family(&self) -> &F {
        &self.family
    }

    pub fn n_states(&self) -> usize {
        self.family.n_states()
    }

    pub fn metric(&self) -> &StateMetric {
        &self.metric
    }

    pub fn matrix(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        transition_matrix(&self.family, theta)
    }
}

impl<F: FiniteFamily> ControlledKernel for FiniteKernel<F> {
    type State = usize;

    fn draw_spec(&self) -> DrawSpec {
        DrawSpec { uniforms: 1, gaussians: 0 }
    }

    #[inline]
    fn sample_next(&self, theta: &[f64], x: &usize, draws: Draws<'_>) -> Result<usize> {
        if theta.iter().any(|t| !t.is_finite()) {
            check_finite("theta", theta)?;
        }
        self.family.sample_index(theta, *x, draws.uniforms[0])
    }

    #[inline]
    fn distance(&self, a: &usize, b: &usize) -> f64 {
        self.metric.distance(*a, *b)
    }

    fn initial_state(&self) -> usize {
        0
    }

    fn random_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.n_states())
    }

    fn states(&self) -> Option<Vec<usize>> {
        Some((0..self.n_states()).collect())
    }

    fn transition_matrix(&self, theta: &[f64]) -> Option<Result<DMatrix<f64>>> {
        Some(self.matrix(theta))
    }

    fn state_index(&self, x: &usize) -> Option<usize> {
        Some(*x)
    }

    fn diameter(&self) -> f64 {
        let n = self.n_states();
        let mut d: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                d = d.max(self.metric.distance(i, j));
            }
        }
        d
    }
}

/// Materialises `P_theta`; rows are renormalised only within [`ROW_SUM_TOL`].
pub fn transition_matrix<F: FiniteFamily + ?Sized>(family: &F, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_finite("theta", theta)?;
    let n = family.n_states();
    let mut p = DMatrix::zeros(n, n);
    let mut row = vec![0.0; n];
    for x in 0..n {
        family.fill_row(theta, x, &mut row);
        let sum = check_row(&row, x)?;
        for j in 0..n {
            p[(x, j)] = row[j] / sum;
        }
    }
    Ok(p)
}

/// Checks primitivity: some power of the positivity pattern is all-positive.
/// Uses the Wielandt bound `(n-1)^2 + 1` on the required exponent.
fn is_primitive(p: &DMatrix<f64>) -> bool {
    let n = p.nrows();
    let pattern: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| p[(i, j)] > 0.0).collect()).collect();
    let mut power = pattern.clone();
    let bound = (n - 1) * (n - 1) + 1;
    for _ in 1..bound {
        if power.iter().all(|r| r.iter().all(|&b| b)) {
            return true;
        }
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for k in 0..n {
                if power[i][k] {
                    for j in 0..n {
                        next[i][j] |= pattern[k][j];
                    }
                }
            }
        }
        power = next;
    }
    power.iter().all(|r| r.iter().all(|&b| b))
}

/// Unique invariant law of an irreducible aperiodic `P`.
///
/// Solves `(I - P^T) pi = 0` with one equation replaced by `sum(pi) = 1`,
/// followed by one step of iterative refinement.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::config("P", "transition matrix must be square and non-empty"));
    }
    if !is_primitive(p) {
        return Err(Error::Ergodicity(
            "transition matrix is reducible or periodic (no power is strictly positive)".into(),
        ));
    }
    let mut a = DMatrix::identity(n, n) - p.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut pi = lu
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular stationary system".into()))?;
    let r = &b - &a * &pi;
    if let Some(corr) = lu.solve(&r) {
        pi += corr;
    }
    let residual = (p.transpose() * &pi - &pi).amax();
    if !(residual <= 1e-12) || pi.iter().any(|v| *v < -1e-12) {
        return Err(Error::Numerical(format!("stationary residual {residual:e} exceeds 1e-12")));
    }
    Ok(pi)
}

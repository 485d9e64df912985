//! Stationary bias balance: at stationarity `E[g(theta, X')] = 0`, and a
//! Taylor expansion of `g` around `theta*` splits that zero into
//!
//! * (I)   `E[g(theta*, X')]`, computed as `E[(P_theta - P_theta*) g_hat(X)]`;
//! * (II)  `E[g'(theta*, X') Delta] = J E[Delta] + (II)'`, where (II)' is the
//!   fluctuation of the local Jacobian around its stationary mean `J`;
//! * (III) `E[g''(theta*, X')[Delta, Delta]] / 2`;
//! * (IV)  the third-order Taylor remainder, evaluated directly.
//!
//! Here `(theta, X, X')` is a stationary iterate, its state and the next state
//! drawn from `P_theta(X, .)`. Because (IV) is measured rather than implied,
//! the sum of the four terms is an honest consistency check.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{run_chain, SaConfig};
use crate::error::{Error, Result};
use crate::kernels::ControlledKernel;
use crate::linalg::norm;
use crate::mean_field::UpdateMap;
use crate::poisson::{GateauxOperator, PoissonSolution};
use crate::rng::stream;

/// One stationary transition: the iterate, its state, and the state drawn next.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSample<S> {
    pub theta: Vec<f64>,
    pub state: S,
    pub next_state: S,
}

/// Records `(theta_k, X_k, X_{k+1})` every `gap` steps after burn-in, over
/// `config.replica_count` independent chains (replica `r` uses stream `r` of
/// `config.seed`). Samples are returned in replica order.
pub fn collect_transition_samples<S, K, M>(
    config: &SaConfig,
    map: &M,
    kernel: &K,
    theta0: &[f64],
    x0: &S,
    gap: u64,
) -> Result<Vec<TransitionSample<S>>>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
    S: Clone + Send + Sync,
{
    config.validate()?;
    if gap == 0 {
        return Err(Error::config("gap", "must be positive"));
    }
    let per_replica: Vec<Result<Vec<TransitionSample<S>>>> = (0..config.replica_count)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(config.seed, r as u64);
            let mut out = Vec::new();
            let mut prev = (theta0.to_vec(), x0.clone());
            run_chain(map, kernel, config.alpha, &config.noise, theta0, x0, config.n_steps, &mut rng, |k, theta, x| {
                if k > config.burn_in && (k - config.burn_in) % gap == 0 {
                    out.push(TransitionSample { theta: prev.0.clone(), state: prev.1.clone(), next_state: x.clone() });
                }
                prev.0.copy_from_slice(theta);
                prev.1 = x.clone();
            })?;
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_replica {
        all.extend(r?);
    }
    Ok(all)
}

/// Sample mean with its standard error `sd / sqrt(n)`, per component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl TermEstimate {
    fn from_samples(rows: &[Vec<f64>], d: usize) -> Self {
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
        let std_error = (0..d)
            .map(|i| {
                if rows.len() < 2 {
                    return f64::NAN;
                }
                let var = rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            })
            .collect();
        Self { mean, std_error }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasTermDecomposition {
    pub n_samples: usize,
    pub theta_star: Vec<f64>,
    /// `E[Delta]`.
    pub bias_hat: TermEstimate,
    /// (I) `E[(P_theta - P_theta*) g_hat(X)]`.
    pub term_i: TermEstimate,
    /// `Lambda_bar E[Delta]`, the mean linear response inside (I).
    pub term_i_linear: TermEstimate,
    /// `E[(Lambda(X) - Lambda_bar) Delta]`.
    pub term_i_fluct: TermEstimate,
    /// (I) minus its linear response: the empirical WD remainder.
    pub term_i_remainder: TermEstimate,
    /// (II) `E[g'(theta*, X') Delta]`.
    pub term_ii: TermEstimate,
    /// (II)' `E[(g'(theta*, X') - J) Delta]`.
    pub term_ii_fluct: TermEstimate,
    /// (III) `E[g''(theta*, X')[Delta, Delta]] / 2`.
    pub term_iii: TermEstimate,
    /// (IV) measured Taylor remainder.
    pub term_iv: TermEstimate,
    /// `(I) + (II) + (III) + (IV)`, zero in expectation at stationarity.
    /// Equivalently `(Lambda_bar + J) bias_hat + (I)' + R + (II)' + (III) + (IV)`.
    pub residual: TermEstimate,
    /// `|residual|`.
    pub reconstruction_residual: f64,
    /// Largest `|residual_i| / se_i` over components.
    pub residual_in_std_errors: f64,
    /// Step used for the second directional differences.
    pub second_difference_step: f64,
}

/// Evaluates the four terms on stationary transition samples.
///
/// `jacobian` is the stationary mean of the partial derivative,
/// `E_pi[d g / d theta (theta*, X)]`.
#[allow(clippy::too_many_arguments)]
pub fn bias_term_decomposition<S, K, M>(
    samples: &[TransitionSample<S>],
    theta_star: &[f64],
    g_hat: &PoissonSolution,
    lambda: &GateauxOperator,
    jacobian: &DMatrix<f64>,
    map: &M,
    kernel: &K,
) -> Result<BiasTermDecomposition>
where
    K: ControlledKernel<State = S>,
    M: UpdateMap<S> + ?Sized,
    S: Sync,
{
    let d = theta_star.len();
    if kernel.states().is_none() {
        return Err(Error::Unsupported(
            "bias-term decomposition needs exact transition matrices (finite kernel)".into(),
        ));
    }
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 samples, got {}", samples.len())));
    }
    if map.dim() != d || lambda.dim() != d || g_hat.values.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: lambda.dim() });
    }
    if jacobian.nrows() != d || jacobian.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: jacobian.nrows() });
    }
    let p_star = kernel.transition_matrix(theta_star).expect("finite kernel")?;
    let n_states = p_star.nrows();
    if g_hat.values.nrows() != n_states {
        return Err(Error::DimensionMismatch { expected: n_states, got: g_hat.values.nrows() });
    }
    let h = 1e-3 * (1.0 + norm(theta_star));
    let affine = map.is_affine();

    struct Row {
        delta: Vec<f64>,
        i: Vec<f64>,
        i_lin: Vec<f64>,
        i_fluct: Vec<f64>,
        ii: Vec<f64>,
        ii_fluct: Vec<f64>,
        iii: Vec<f64>,
        iv: Vec<f64>,
    }

    let rows: Vec<Result<Row>> = samples
        .par_iter()
        .map(|s| {
            let idx = kernel
                .state_index(&s.state)
                .ok_or_else(|| Error::config("samples", "state outside the kernel's state space"))?;
            if s.theta.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.theta.len() });
            }
            let delta: Vec<f64> = s.theta.iter().zip(theta_star).map(|(a, b)| a - b).collect();

            let p = kernel.transition_matrix(&s.theta).expect("finite kernel")?;
            let mut i = vec![0.0; d];
            for y in 0..n_states {
                let w = p[(idx, y)] - p_star[(idx, y)];
                for c in 0..d {
                    i[c] += w * g_hat.values[(y, c)];
                }
            }
            let mut i_local = vec![0.0; d];
            for (j, l) in lambda.lambda.iter().enumerate() {
                for c in 0..d {
                    i_local[c] += l[(idx, c)] * delta[j];
                }
            }
            let i_lin: Vec<f64> = (0..d).map(|c| (0..d).map(|j| lambda.lambda_bar[(c, j)] * delta[j]).sum()).collect();
            let i_fluct: Vec<f64> = i_local.iter().zip(&i_lin).map(|(a, b)| a - b).collect();

            let x1 = &s.next_state;
            let jac = map.jacobian(theta_star, x1);
            let ii: Vec<f64> = (0..d).map(|c| (0..d).map(|j| jac[(c, j)] * delta[j]).sum()).collect();
            let ii_fluct: Vec<f64> =
                (0..d).map(|c| ii[c] - (0..d).map(|j| jacobian[(c, j)] * delta[j]).sum::<f64>()).collect();

            let mut g_star = vec![0.0; d];
            map.eval(theta_star, x1, &mut g_star);
            let dn = norm(&delta);
            let iii: Vec<f64> = if affine || dn == 0.0 {
                vec![0.0; d]
            } else {
                let plus: Vec<f64> = theta_star.iter().zip(&delta).map(|(t, u)| t + h * u / dn).collect();
                let minus: Vec<f64> = theta_star.iter().zip(&delta).map(|(t, u)| t - h * u / dn).collect();
                let (mut gp, mut gm) = (vec![0.0; d], vec![0.0; d]);
                map.eval(&plus, x1, &mut gp);
                map.eval(&minus, x1, &mut gm);
                (0..d).map(|c| 0.5 * (gp[c] - 2.0 * g_star[c] + gm[c]) / (h * h) * dn * dn).collect()
            };
            let mut g_theta = vec![0.0; d];
            map.eval(&s.theta, x1, &mut g_theta);
            let iv: Vec<f64> = (0..d).map(|c| g_theta[c] - g_star[c] - ii[c] - iii[c]).collect();
            Ok(Row { delta, i, i_lin, i_fluct, ii, ii_fluct, iii, iv })
        })
        .collect();
    let rows: Vec<Row> = rows.into_iter().collect::<Result<_>>()?;

    let est = |f: &dyn Fn(&Row) -> Vec<f64>| TermEstimate::from_samples(&rows.iter().map(f).collect::<Vec<_>>(), d);
    let term_i = est(&|r| r.i.clone());
    let residual = est(&|r| (0..d).map(|c| r.i[c] + r.ii[c] + r.iii[c] + r.iv[c]).collect());
    let residual_in_std_errors = residual
        .mean
        .iter()
        .zip(&residual.std_error)
        .map(|(m, s)| if *s > 0.0 { m.abs() / s } else if *m == 0.0 { 0.0 } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let out = BiasTermDecomposition {
        n_samples: rows.len(),
        theta_star: theta_star.to_vec(),
        bias_hat: est(&|r| r.delta.clone()),
        term_i_linear: est(&|r| r.i_lin.clone()),
        term_i_fluct: est(&|r| r.i_fluct.clone()),
        term_i_remainder: est(&|r| (0..d).map(|c| r.i[c] - r.i_lin[c] - r.i_fluct[c]).collect()),
        term_i,
        term_ii: est(&|r| r.ii.clone()),
        term_ii_fluct: est(&|r| r.ii_fluct.clone()),
        term_iii: est(&|r| r.iii.clone()),
        term_iv: est(&|r| r.iv.clone()),
        reconstruction_residual: residual.norm(),
        residual,
        residual_in_std_errors,
        second_difference_step: h,
    };
    let all = [&out.term_i, &out.term_ii, &out.term_iii, &out.term_iv];
    if all.iter().any(|t| t.mean.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite bias term".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NoiseSpec;
    use crate::kernels::{ClippedArKernel, FiniteKernel, Response, TwoStateFamily};
    use crate::mean_field::{find_root, partial_jacobian, AffineMap, McBudget, RootOptions, ScalarTanhMix, StateTable};
    use crate::poisson::{gateaux_derivative, poisson_for_map};

    fn shipped_kernel() -> FiniteKernel<TwoStateFamily> {
        FiniteKernel::new(TwoStateFamily::new(Response::tanh(0.5, 0.3), Response::tanh(0.5, -0.3)))
    }

    fn shipped_map() -> ScalarTanhMix<StateTable> {
        ScalarTanhMix::new::<usize>(
            StateTable::scalar(&[4.0, -2.0]).unwrap(),
            StateTable::scalar(&[1.0, 0.5]).unwrap(),
            1.0,
            0.2,
        )
        .unwrap()
    }

    fn decompose<K, M>(map: &M, kernel: &K, alpha: f64, noise: NoiseSpec) -> BiasTermDecomposition
    where
        K: ControlledKernel<State = usize>,
        M: UpdateMap<usize>,
    {
        let cert = find_root(map, kernel, &[0.0], &RootOptions::default()).unwrap();
        let ts = cert.theta_star.clone();
        let (sol, _, _) = poisson_for_map(map, kernel, &ts).unwrap();
        let op = gateaux_derivative(kernel, &ts, &sol, None).unwrap();
        let jac = partial_jacobian(map, kernel, &ts, &McBudget::default()).unwrap();
        let mut cfg = SaConfig::new(alpha, 400_000, 20_000, 11);
        cfg.replica_count = 4;
        cfg.noise = noise;
        let samples = collect_transition_samples(&cfg, map, kernel, &ts, &0, 100).unwrap();
        bias_term_decomposition(&samples, &ts, &sol, &op, &jac, map, kernel).unwrap()
    }

    #[test]
    fn samples_pair_iterate_with_next_state() {
        let kernel = shipped_kernel();
        let map = shipped_map();
        let mut cfg = SaConfig::new(0.05, 1000, 100, 3);
        cfg.replica_count = 2;
        let samples = collect_transition_samples(&cfg, &map, &kernel, &[0.0], &0, 300).unwrap();
        assert_eq!(samples.len(), 2 * 3);
        // Replaying replica 0 reproduces the first sample.
        let mut rng = stream(3, 0);
        let mut trace = vec![(vec![0.0], 0usize)];
        run_chain(&map, &kernel, 0.05, &NoiseSpec::None, &[0.0], &0, 400, &mut rng, |_, t, x| {
            trace.push((t.to_vec(), *x))
        })
        .unwrap();
        assert_eq!(samples[0].theta, trace[399].0);
        assert_eq!(samples[0].state, trace[399].1);
        assert_eq!(samples[0].next_state, trace[400].1);
    }

    #[test]
    fn decision_independent_kernel_has_no_term_i() {
        let kernel = FiniteKernel::new(TwoStateFamily::constant(0.3, 0.6));
        let d = decompose(&shipped_map(), &kernel, 0.02, NoiseSpec::None);
        assert_eq!(d.term_i.mean, vec![0.0]);
        assert_eq!(d.term_i_linear.mean, vec![0.0]);
        assert!(d.residual_in_std_errors < 5.0, "{}", d.residual_in_std_errors);
    }

    #[test]
    fn linear_map_has_no_curvature_terms() {
        let map = AffineMap::new::<usize>(
            DMatrix::from_element(1, 1, -1.0),
            StateTable::scalar(&[1.0, -1.0]).unwrap(),
        )
        .unwrap();
        let d = decompose(&map, &shipped_kernel(), 0.02, NoiseSpec::Gaussian { scale: 0.5 });
        assert_eq!(d.term_iii.mean, vec![0.0]);
        assert!(d.term_ii_fluct.mean[0].abs() < 1e-12);
        assert!(d.term_iv.mean[0].abs() < 1e-12);
        assert!(d.residual_in_std_errors < 5.0, "{}", d.residual_in_std_errors);
    }

    #[test]
    fn shipped_problem_balances() {
        let d = decompose(&shipped_map(), &shipped_kernel(), 0.02, NoiseSpec::None);
        assert!(d.residual_in_std_errors < 5.0, "{}", d.residual_in_std_errors);
        assert!(d.term_i.norm() > 0.0 && d.term_iii.norm() > 0.0);
        // Higher-order pieces are small next to the first-order ones.
        assert!(d.term_iv.norm() < d.term_ii.norm());
        assert!(d.term_i_remainder.norm() < d.term_i_linear.norm());
    }

    #[test]
    fn continuous_kernels_unsupported() {
        let kernel = ClippedArKernel::new(0.5, Response::Constant { value: 0.0 }, Response::Constant { value: 1.0 }, 3.0).unwrap();
        let map = AffineMap::linear_hx::<f64>(crate::mean_field::Identity { dim: 1 });
        let sol = PoissonSolution {
            values: DMatrix::zeros(1, 1),
            centering_residual: 0.0,
            equation_residual: 0.0,
            depth: None,
            tail_bound: None,
            rho_hat: None,
            non_contracting: false,
        };
        let op = GateauxOperator {
            lambda: vec![DMatrix::zeros(1, 1)],
            lambda_bar: DMatrix::zeros(1, 1),
            fd_steps: [1e-3, 5e-4],
            richardson_error: 0.0,
            suspect_directions: vec![],
        };
        let s = vec![TransitionSample { theta: vec![0.0], state: 0.0, next_state: 0.0 }; 3];
        let err = bias_term_decomposition(&s, &[0.0], &sol, &op, &DMatrix::zeros(1, 1), &map, &kernel).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }
}

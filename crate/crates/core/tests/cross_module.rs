//! Checks that tie several modules together through the public API.

use dsa_core::engine::{run_sa, SaConfig};
use dsa_core::estimators::bias_estimate;
use dsa_core::kernels::{FiniteKernel, Response, TwoStateFamily};
use dsa_core::mean_field::{
    find_root, jacobian_at, partial_jacobian, AffineMap, McBudget, RootOptions, ScalarTanhMix, StateTable,
};
use dsa_core::poisson::{gateaux_derivative, poisson_for_map};

fn tanh_kernel() -> FiniteKernel<TwoStateFamily> {
    FiniteKernel::new(TwoStateFamily::new(Response::tanh(0.4, 0.3), Response::tanh(0.5, -0.1)))
}

fn linear_map() -> AffineMap<StateTable> {
    AffineMap::linear_hx(StateTable::scalar(&[1.0, -1.0]).unwrap())
}

fn bias_at(kernel: &FiniteKernel<TwoStateFamily>, theta_star: &[f64], alpha: f64, seed: u64) -> (f64, f64) {
    let steps = (4_000.0 / alpha) as u64;
    let mut cfg = SaConfig::new(alpha, steps + 2_000, 2_000, seed);
    cfg.replica_count = 16;
    let run = run_sa(&cfg, &linear_map(), kernel, theta_star, &0usize, theta_star).unwrap();
    let b = bias_estimate(&run.replicas, theta_star).unwrap();
    (b.bias[0], b.std_error[0])
}

/// The derivative of the mean field splits into the map's own sensitivity and
/// the response of the stationary law, which is what the Gateaux operator
/// averages to.
#[test]
fn kernel_response_plus_partial_jacobian_is_total_jacobian() {
    let map = ScalarTanhMix::new(
        StateTable::scalar(&[4.0, -2.0]).unwrap(),
        StateTable::scalar(&[1.0, 0.5]).unwrap(),
        1.0,
        0.2,
    )
    .unwrap();
    let k = tanh_kernel();
    let ts = find_root(&map, &k, &[0.0], &RootOptions::default()).unwrap().theta_star;
    let (sol, _, _) = poisson_for_map(&map, &k, &ts).unwrap();
    let op = gateaux_derivative(&k, &ts, &sol, None).unwrap();
    let budget = McBudget::default();
    let total = jacobian_at(&map, &k, &ts, None, &budget).unwrap().matrix;
    let partial = partial_jacobian(&map, &k, &ts, &budget).unwrap();
    let gap = (&op.lambda_bar + &partial - &total).amax();
    assert!(gap < 1e-6, "lambda_bar {} + partial {} vs total {}", op.lambda_bar, partial, total);
    assert!(op.lambda_bar.amax() > 0.05, "the kernel response should matter here");
}

/// With a chain that ignores the decision and an affine map, stationarity
/// forces `E[theta] = pi h` exactly: no bias at any step size.
#[test]
fn decision_independent_affine_problem_is_unbiased() {
    let k = FiniteKernel::new(TwoStateFamily::constant(0.3, 0.6));
    let ts = find_root(&linear_map(), &k, &[0.0], &RootOptions::default()).unwrap().theta_star;
    assert!((ts[0] - (0.6 - 0.3) / 0.9).abs() < 1e-10, "{ts:?}");
    let (bias, se) = bias_at(&k, &ts, 0.1, 11);
    assert!(bias.abs() <= 4.0 * se, "bias {bias} se {se}");
}

/// Once the chain reacts to the decision the same affine problem is biased,
/// and halving the step size roughly halves the bias.
#[test]
fn decision_dependent_bias_is_first_order() {
    let k = tanh_kernel();
    let ts = find_root(&linear_map(), &k, &[0.0], &RootOptions::default()).unwrap().theta_star;
    let (b1, s1) = bias_at(&k, &ts, 0.1, 21);
    let (b2, s2) = bias_at(&k, &ts, 0.05, 22);
    assert!(b1.abs() > 10.0 * s1, "bias {b1} se {s1}");
    assert!(b2.abs() > 10.0 * s2, "bias {b2} se {s2}");
    let ratio = b1 / b2;
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}

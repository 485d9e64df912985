//! Stage runner: setup diagnostics, the step-size sweep and each requested
//! analysis. A failing stage is recorded and the remaining stages still run.

use std::path::PathBuf;
use std::time::Instant;

use dsa_core::engine::{
    default_burn_in, forgetting_rate, moment_snapshot, run_chain, run_coupled, run_sa, MomentAccumulator, SaConfig,
};
use dsa_core::estimators::{
    bias_estimate, bias_term_decomposition, clt_coverage, collect_transition_samples, geometric_rate_fit,
    green_kubo_pooled, loglog_slope, rr_extrapolate, scaling_report, ScalingReport, ScalingRow,
};
use dsa_core::kernels::{estimate_contraction, ControlledKernel};
use dsa_core::linalg::max_sym_eigenvalue;
use dsa_core::mean_field::{
    estimate_conditional_monotonicity, estimate_monotonicity, find_root, partial_jacobian, McBudget, RootCertificate,
    RootOptions, UpdateMap,
};
use dsa_core::poisson::{
    bias_operator, gateaux_derivative, geometric_radii, image_bounds, poisson_for_map, wd_remainder_scan,
};
use dsa_core::rng::{derive_key, label, stream};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{rr_pairs, Analysis, ExperimentConfig};
use crate::error::LabError;
use crate::manifest::{config_hash, RunManifest, SeedRecord, StageRecord, StageStatus};
use crate::output::{num, rows_of, Csv, Sink};
use crate::registry::{with_problem, ProblemVisitor};
use crate::svg::{Plot, Series};

/// Command-line style overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool. Never changes results.
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.manifest.failed_stages().next().is_some()
    }
}

/// Runs every requested analysis and writes outputs plus `manifest.json`.
///
/// Configuration problems are returned as errors; analysis failures are
/// recorded in the manifest (see [`RunOutcome::failed`]).
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, LabError> {
    let mut config = config.clone();
    if let Some(seed) = opts.seed_override {
        config.seed = seed;
    }
    if let Some(dir) = &opts.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    let mut sink = Sink::new(&config.output_dir)?;
    let mut state = RunState { seeds: Vec::new(), stages: Vec::new(), warnings: Vec::new() };

    let work = |sink: &mut Sink, state: &mut RunState| -> Result<(), LabError> {
        if config.analyses.is_empty() {
            return Ok(());
        }
        let runner = Runner { config: &config, sink, state };
        match with_problem(&config.problem, config.theta_dim(), runner) {
            Ok(r) => r,
            Err(e) => Err(crate::error::ConfigError::Invalid(vec![e]).into()),
        }
    };
    let threads = match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| LabError::Threads(e.to_string()))?;
            pool.install(|| work(&mut sink, &mut state))?;
            n
        }
        None => {
            work(&mut sink, &mut state)?;
            rayon::current_num_threads()
        }
    };

    let mut outputs = sink.written.clone();
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        software: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash(&config),
        config: config.clone(),
        threads,
        seeds: state.seeds,
        stages: state.stages,
        warnings: state.warnings,
        outputs,
    };
    sink.json("manifest.json", &manifest)?;
    Ok(RunOutcome { output_dir: config.output_dir.clone(), manifest })
}

struct RunState {
    seeds: Vec<SeedRecord>,
    stages: Vec<StageRecord>,
    warnings: Vec<String>,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    sink: &'a mut Sink,
    state: &'a mut RunState,
}

/// Stage failures: numerical errors from the core, or output errors.
#[derive(Debug)]
enum StageError {
    Core(dsa_core::Error),
    Output(LabError),
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageError::Core(e) => write!(f, "{e}"),
            StageError::Output(e) => write!(f, "{e}"),
        }
    }
}

impl From<dsa_core::Error> for StageError {
    fn from(e: dsa_core::Error) -> Self {
        StageError::Core(e)
    }
}

impl From<LabError> for StageError {
    fn from(e: LabError) -> Self {
        StageError::Output(e)
    }
}

type StageResult<T> = Result<T, StageError>;

/// Quantities every analysis needs.
#[derive(Debug, Clone, Serialize)]
struct Setup {
    theta_star: Vec<f64>,
    root: RootCertificate,
    jacobian_partial: Vec<Vec<f64>>,
    #[serde(skip)]
    jacobian_partial_matrix: DMatrix<f64>,
    /// Smallest monotonicity constant observed on the decision grid.
    mu_g: f64,
    monotonicity_kind: &'static str,
    rho_hat: f64,
    rho_ci_width: f64,
    lp_hat: f64,
    /// Largest `|d g / d theta|` on the grid.
    l1_hat: f64,
    /// Right-hand side of the sensitivity condition `L_P <= rho^2 mu^2 / (128 L1^2 (2 - rho))`.
    sensitivity_bound: f64,
    sensitivity_ok: bool,
    grid_radius: f64,
}

struct AlphaRun {
    alpha: f64,
    burn_in: u64,
    post_steps: u64,
    replicas: Vec<MomentAccumulator>,
}

impl Runner<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> StageResult<T>) -> Option<T> {
        let start = Instant::now();
        let result = f(self);
        let seconds = start.elapsed().as_secs_f64();
        let (status, error, value) = match result {
            Ok(v) => (StageStatus::Ok, None, Some(v)),
            Err(e) => (StageStatus::Failed, Some(e.to_string()), None),
        };
        self.state.stages.push(StageRecord { name: name.to_string(), status, error, seconds });
        value
    }

    fn fail(&mut self, name: &str, why: &str) {
        self.state.stages.push(StageRecord {
            name: name.to_string(),
            status: StageStatus::Failed,
            error: Some(why.to_string()),
            seconds: 0.0,
        });
    }

    fn seed(&mut self, stage: &str, alpha: Option<f64>, key: u64, replicas: usize) {
        self.state.seeds.push(SeedRecord { stage: stage.to_string(), alpha, key, replicas });
    }

    fn burn_in(&self, setup: &Setup, alpha: f64) -> StageResult<u64> {
        let tau = forgetting_rate(alpha, setup.mu_g, setup.rho_hat);
        Ok(default_burn_in(tau, self.config.tuning.burn_in_factor)?)
    }
}

impl ProblemVisitor for Runner<'_> {
    type Output = Result<(), LabError>;

    fn visit<K>(mut self, kernel: &K, map: &dyn UpdateMap<K::State>) -> Self::Output
    where
        K: ControlledKernel,
        K::State: Send + Sync,
    {
        let cfg = self.config;
        let Some(setup) = self.stage("setup", |r| setup_stage(r, kernel, map)) else {
            for a in &cfg.analyses {
                self.fail(a.name(), "setup failed");
            }
            return Ok(());
        };

        let needs_sweep = [Analysis::Bias, Analysis::Moments, Analysis::Rr].iter().any(|a| cfg.wants(*a));
        let sweep = if needs_sweep { self.stage("sweep", |r| sweep_stage(r, kernel, map, &setup)) } else { None };
        let mut bias_report = None;
        for a in [Analysis::Bias, Analysis::Moments, Analysis::Rr] {
            if !cfg.wants(a) {
                continue;
            }
            let Some(runs) = &sweep else {
                self.fail(a.name(), "sweep failed");
                continue;
            };
            match a {
                Analysis::Bias => bias_report = self.stage("bias", |r| bias_stage(r, runs, &setup)),
                Analysis::Moments => {
                    self.stage("moments", |r| moments_stage(r, runs, &setup));
                }
                _ => {
                    self.stage("rr", |r| rr_stage(r, runs, &setup, bias_report.as_ref()));
                }
            }
        }
        if cfg.wants(Analysis::Clt) {
            self.stage("clt", |r| clt_stage(r, kernel, map, &setup));
        }
        if cfg.wants(Analysis::Coupling) {
            self.stage("coupling", |r| coupling_stage(r, kernel, map, &setup));
        }
        if cfg.wants(Analysis::WdScan) {
            self.stage("wd_scan", |r| wd_stage(r, kernel, map, &setup));
        }
        if cfg.wants(Analysis::Decomposition) {
            self.stage("decomposition", |r| decomposition_stage(r, kernel, map, &setup));
        }
        Ok(())
    }
}

fn decision_grid(theta_star: &[f64], radius: f64) -> Vec<Vec<f64>> {
    let mut grid = vec![theta_star.to_vec()];
    for j in 0..theta_star.len() {
        for s in [-1.0, -0.5, -0.25, 0.25, 0.5, 1.0] {
            let mut t = theta_star.to_vec();
            t[j] += s * radius;
            grid.push(t);
        }
    }
    grid
}

fn setup_stage<K>(r: &mut Runner<'_>, kernel: &K, map: &dyn UpdateMap<K::State>) -> StageResult<Setup>
where
    K: ControlledKernel,
    K::State: Send + Sync,
{
    let cfg = r.config;
    let t = &cfg.tuning;
    let d = cfg.theta_dim();
    let budget = McBudget { steps: t.mc_steps, burn_in: t.mc_steps / 100, seed: derive_key(cfg.seed, label("mean_field")) };
    let theta0 = t.theta0.clone().unwrap_or_else(|| vec![0.0; d]);
    let root = find_root(map, kernel, &theta0, &RootOptions { budget, ..RootOptions::default() })?;
    let ts = root.theta_star.clone();
    let grid = decision_grid(&ts, t.grid_radius);
    let (mu_g, monotonicity_kind) = if kernel.states().is_some() {
        (estimate_conditional_monotonicity(map, kernel, &grid)?, "conditional")
    } else {
        (estimate_monotonicity(map, kernel, &grid, &budget)?, "mean_field")
    };
    let diag_key = derive_key(cfg.seed, label("diagnostics"));
    let diag = estimate_contraction(kernel, &ts, t.diagnostic_pairs, diag_key)?;

    let states: Vec<K::State> = match kernel.states() {
        Some(s) => s,
        None => {
            let mut rng = stream(diag_key, 1);
            (0..32).map(|_| kernel.random_state(&mut rng)).collect()
        }
    };
    let l1_hat = match map.hints().lipschitz {
        Some(l) => l,
        None => {
            let mut best: f64 = 0.0;
            for th in &grid {
                for x in &states {
                    let j = map.jacobian(th, x);
                    best = best.max(max_sym_eigenvalue(&(j.transpose() * &j)).max(0.0).sqrt());
                }
            }
            best
        }
    };
    let jac = partial_jacobian(map, kernel, &ts, &budget)?;
    let rho = diag.rho_hat;
    let sensitivity_bound = if l1_hat > 0.0 && mu_g > 0.0 {
        rho * rho * mu_g * mu_g / (128.0 * l1_hat * l1_hat * (2.0 - rho))
    } else {
        0.0
    };
    let sensitivity_ok = diag.lp_hat <= sensitivity_bound;
    if !sensitivity_ok {
        r.state.warnings.push(format!(
            "sensitivity condition not met: L_P estimate {:.4e} exceeds rho^2 mu^2 / (128 L1^2 (2 - rho)) = {:.4e} \
             (rho {:.4}, mu {:.4}, L1 {:.4}); the forgetting-rate guarantee is not certified",
            diag.lp_hat, sensitivity_bound, rho, mu_g, l1_hat
        ));
    }
    if !(mu_g > 0.0) {
        r.state.warnings.push(format!("monotonicity estimate {mu_g:.4e} is not positive"));
    }
    if diag.degenerate {
        r.state.warnings.push("contraction estimate is degenerate (no distinct state pairs)".into());
    }
    let setup = Setup {
        theta_star: ts,
        root,
        jacobian_partial: rows_of(&jac),
        jacobian_partial_matrix: jac,
        mu_g,
        monotonicity_kind,
        rho_hat: rho,
        rho_ci_width: diag.ci_width,
        lp_hat: diag.lp_hat,
        l1_hat,
        sensitivity_bound,
        sensitivity_ok,
        grid_radius: t.grid_radius,
    };
    let taus: Vec<Value> = cfg
        .alphas
        .iter()
        .map(|&a| {
            let tau = forgetting_rate(a, mu_g, rho);
            json!({ "alpha": a, "tau": tau, "burn_in": default_burn_in(tau, t.burn_in_factor).ok() })
        })
        .collect();
    r.sink.json(
        "diagnostics.json",
        &json!({
            "setup": &setup,
            "root_jacobian_total": rows_of(&setup.root.jacobian),
            "forgetting_rates": taus,
        }),
    )?;
    Ok(setup)
}

fn sweep_stage<K>(r: &mut Runner<'_>, kernel: &K, map: &dyn UpdateMap<K::State>, setup: &Setup) -> StageResult<Vec<AlphaRun>>
where
    K: ControlledKernel,
    K::State: Send + Sync,
{
    let cfg = r.config;
    let sweep_key = derive_key(cfg.seed, label("sweep"));
    let x0 = kernel.initial_state();
    let mut runs = Vec::with_capacity(cfg.alphas.len());
    for (i, &alpha) in cfg.alphas.iter().enumerate() {
        let burn_in = r.burn_in(setup, alpha)?;
        let post_steps = cfg.steps_at(alpha);
        let key = derive_key(sweep_key, i as u64);
        let mut sc = SaConfig::new(alpha, burn_in + post_steps, burn_in, key);
        sc.replica_count = cfg.replicas;
        sc.noise = cfg.problem.noise;
        r.seed("sweep", Some(alpha), key, cfg.replicas);
        let run = run_sa(&sc, map, kernel, &setup.theta_star, &x0, &setup.theta_star)?;
        runs.push(AlphaRun { alpha, burn_in, post_steps, replicas: run.replicas });
    }
    Ok(runs)
}

fn scaling_csv(rows: &[ScalingRow]) -> Csv {
    let mut csv = Csv::new(&["alpha", "estimate", "std_error", "n_replicas"]);
    for row in rows {
        csv.row(&[num(row.alpha), num(row.estimate), num(row.std_error), row.n_replicas.to_string()]);
    }
    csv
}

fn scaling_plot(title: &str, y_label: &str, series: Vec<(&str, &[ScalingRow], Option<(f64, f64)>)>) -> Plot {
    Plot {
        title: title.into(),
        x_label: "step size alpha".into(),
        y_label: y_label.into(),
        log_x: true,
        log_y: true,
        series: series
            .into_iter()
            .map(|(name, rows, fit)| {
                let s = Series::points(name, rows.iter().map(|r| (r.alpha, r.estimate)).collect());
                match fit {
                    Some((slope, intercept)) => s.with_fit(slope, intercept),
                    None => s,
                }
            })
            .collect(),
    }
}

fn summary(report: &ScalingReport) -> Value {
    json!({
        "slope": report.slope,
        "slope_std_error": report.slope_std_error,
        "intercept": report.intercept,
        "r_squared": report.r_squared,
    })
}

fn bias_stage(r: &mut Runner<'_>, runs: &[AlphaRun], setup: &Setup) -> StageResult<ScalingReport> {
    let mut rows = Vec::new();
    let mut detail = Vec::new();
    for run in runs {
        let b = bias_estimate(&run.replicas, &setup.theta_star)?;
        rows.push(ScalingRow { alpha: run.alpha, estimate: b.norm, std_error: b.norm_std_error, n_replicas: b.n_replicas });
        detail.push(json!({
            "alpha": run.alpha,
            "burn_in": run.burn_in,
            "post_burn_in_steps": run.post_steps,
            "bias": b.bias,
            "std_error": b.std_error,
            "norm": b.norm,
            "norm_std_error": b.norm_std_error,
            "norm_over_alpha": b.norm / run.alpha,
        }));
    }
    r.sink.csv("scaling_bias.csv", scaling_csv(&rows))?;
    let report = scaling_report(rows)?;
    let mut out = summary(&report);
    out["theta_star"] = json!(setup.theta_star);
    out["rows"] = Value::Array(detail);
    r.sink.json("scaling_bias.json", &out)?;
    let plot = scaling_plot("Stationary bias", "|bias|", vec![("|bias|", &report.rows, Some((report.slope, report.intercept)))]);
    r.sink.text("plots/scaling_bias.svg", &plot.render())?;
    Ok(report)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn moments_stage(r: &mut Runner<'_>, runs: &[AlphaRun], setup: &Setup) -> StageResult<()> {
    let mut m2_rows = Vec::new();
    let mut m4_rows = Vec::new();
    let mut m_alpha = Vec::new();
    for run in runs {
        let snaps =
            run.replicas.iter().map(|acc| moment_snapshot(acc, &setup.theta_star)).collect::<Result<Vec<_>, _>>()?;
        let (m2, se2) = mean_and_se(&snaps.iter().map(|s| s.m2).collect::<Vec<_>>());
        let (m4, se4) = mean_and_se(&snaps.iter().map(|s| s.m4).collect::<Vec<_>>());
        m2_rows.push(ScalingRow { alpha: run.alpha, estimate: m2, std_error: se2, n_replicas: snaps.len() });
        m4_rows.push(ScalingRow { alpha: run.alpha, estimate: m4, std_error: se4, n_replicas: snaps.len() });
        let mut m = snaps[0].m_alpha.clone() * 0.0;
        for s in &snaps {
            m += &s.m_alpha;
        }
        m_alpha.push((run.alpha, m / snaps.len() as f64));
    }
    r.sink.csv("scaling_m2.csv", scaling_csv(&m2_rows))?;
    r.sink.csv("scaling_m4.csv", scaling_csv(&m4_rows))?;
    let m2 = scaling_report(m2_rows)?;
    let m4 = scaling_report(m4_rows)?;
    let cauchy: Vec<Value> = m_alpha
        .windows(2)
        .map(|w| json!({ "alpha": w[0].0, "next_alpha": w[1].0, "max_abs_difference": (&w[0].1 - &w[1].1).amax() }))
        .collect();
    let out = json!({
        "m2": summary(&m2),
        "m4": summary(&m4),
        "m_alpha": m_alpha.iter().map(|(a, m)| json!({ "alpha": a, "matrix": rows_of(m) })).collect::<Vec<_>>(),
        "m_alpha_cauchy": cauchy,
    });
    r.sink.json("scaling_moments.json", &out)?;
    let plot = scaling_plot(
        "Stationary moments",
        "E|theta - theta*|^(2n)",
        vec![
            ("second moment", &m2.rows, Some((m2.slope, m2.intercept))),
            ("fourth moment", &m4.rows, Some((m4.slope, m4.intercept))),
        ],
    );
    r.sink.text("plots/scaling_moments.svg", &plot.render())?;
    Ok(())
}

fn replica_mean(run: &AlphaRun) -> StageResult<(Vec<f64>, Vec<f64>)> {
    let means = run.replicas.iter().map(|a| a.mean_theta()).collect::<Result<Vec<_>, _>>()?;
    let d = means[0].len();
    let mut mean = Vec::with_capacity(d);
    let mut se = Vec::with_capacity(d);
    for i in 0..d {
        let (m, s) = mean_and_se(&means.iter().map(|v| v[i]).collect::<Vec<_>>());
        mean.push(m);
        se.push(s);
    }
    Ok((mean, se))
}

fn norm_with_se(v: &[f64], se: &[f64]) -> (f64, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = if n > 0.0 {
        v.iter().zip(se).map(|(b, s)| (b / n * s).powi(2)).sum::<f64>().sqrt()
    } else {
        se.iter().map(|s| s * s).sum::<f64>().sqrt()
    };
    (n, s)
}

fn rr_stage(r: &mut Runner<'_>, runs: &[AlphaRun], setup: &Setup, raw: Option<&ScalingReport>) -> StageResult<()> {
    let alphas: Vec<f64> = runs.iter().map(|run| run.alpha).collect();
    let ts = &setup.theta_star;
    let mut rr_rows = Vec::new();
    let mut raw_rows = Vec::new();
    let mut detail = Vec::new();
    let mut csv = Csv::new(&["alpha", "rr_estimate", "rr_std_error", "raw_estimate", "raw_std_error", "n_replicas"]);
    for (i, j) in rr_pairs(&alphas) {
        let (m1, s1) = replica_mean(&runs[i])?;
        let (m2, s2) = replica_mean(&runs[j])?;
        let rr: Vec<f64> = rr_extrapolate(&m1, &m2)?.iter().zip(ts).map(|(a, b)| a - b).collect();
        let rr_se: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| (4.0 * a * a + b * b).sqrt()).collect();
        let raw_bias: Vec<f64> = m1.iter().zip(ts).map(|(a, b)| a - b).collect();
        let (rn, rs) = norm_with_se(&rr, &rr_se);
        let (bn, bs) = norm_with_se(&raw_bias, &s1);
        let n = runs[i].replicas.len();
        csv.row(&[num(alphas[i]), num(rn), num(rs), num(bn), num(bs), n.to_string()]);
        rr_rows.push(ScalingRow { alpha: alphas[i], estimate: rn, std_error: rs, n_replicas: n });
        raw_rows.push(ScalingRow { alpha: alphas[i], estimate: bn, std_error: bs, n_replicas: n });
        detail.push(json!({ "alpha": alphas[i], "rr_bias": rr, "rr_std_error": rr_se }));
    }
    r.sink.csv("rr.csv", csv)?;
    let rr_fit = loglog_slope(&rr_rows)?;
    let raw_same = loglog_slope(&raw_rows)?;
    let raw_full = raw.map(|rep| rep.slope).unwrap_or(raw_same.slope);
    let out = json!({
        "rr_slope": rr_fit.slope,
        "rr_slope_std_error": rr_fit.slope_std_error,
        "rr_intercept": rr_fit.intercept,
        "rr_r_squared": rr_fit.r_squared,
        "raw_slope_same_alphas": raw_same.slope,
        "raw_slope": raw_full,
        "slope_gain": rr_fit.slope - raw_full,
        "rows": detail,
    });
    r.sink.json("rr.json", &out)?;
    let plot = scaling_plot(
        "Richardson-Romberg extrapolation",
        "|bias|",
        vec![
            ("raw", &raw_rows, Some((raw_same.slope, raw_same.intercept))),
            ("extrapolated", &rr_rows, Some((rr_fit.slope, rr_fit.intercept))),
        ],
    );
    r.sink.text("plots/rr.svg", &plot.render())?;
    Ok(())
}

fn clt_stage<K>(r: &mut Runner<'_>, kernel: &K, map: &dyn UpdateMap<K::State>, setup: &Setup) -> StageResult<()>
where
    K: ControlledKernel,
    K::State: Send + Sync,
{
    let cfg = r.config;
    let t = &cfg.tuning;
    let alpha = t.clt_alpha;
    let n = t.clt_steps;
    let d = setup.theta_star.len();
    let burn_in = r.burn_in(setup, alpha)?;
    let x0 = kernel.initial_state();

    let key = derive_key(cfg.seed, label("clt"));
    let mut sc = SaConfig::new(alpha, burn_in + n, burn_in, key);
    sc.replica_count = t.clt_replicas;
    sc.noise = cfg.problem.noise;
    sc.moment_order = 1;
    r.seed("clt", Some(alpha), key, t.clt_replicas);
    let run = run_sa(&sc, map, kernel, &setup.theta_star, &x0, &setup.theta_star)?;
    let means = run.replicas.iter().map(|a| a.mean_theta()).collect::<Result<Vec<_>, _>>()?;

    let cov_key = derive_key(cfg.seed, label("clt_covariance"));
    r.seed("clt_covariance", Some(alpha), cov_key, t.clt_covariance_chains);
    let series: Vec<Result<Vec<f64>, dsa_core::Error>> = (0..t.clt_covariance_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(cov_key, c as u64);
            let mut s = Vec::with_capacity(n as usize * d);
            run_chain(map, kernel, alpha, &cfg.problem.noise, &setup.theta_star, &x0, burn_in + n, &mut rng, |k, th, _| {
                if k > burn_in {
                    s.extend_from_slice(th);
                }
            })?;
            Ok(s)
        })
        .collect();
    let series = series.into_iter().collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
    let max_lag = ((n / 50) as usize).clamp(1, 1000);
    let gk = green_kubo_pooled(&refs, d, max_lag)?;
    let cov = clt_coverage(&means, n, &gk.sigma_h, t.clt_nominal)?;
    let out = json!({
        "alpha": alpha,
        "n_steps": n,
        "burn_in": burn_in,
        "replicas": t.clt_replicas,
        "covariance_chains": t.clt_covariance_chains,
        "sigma_h": rows_of(&gk.sigma_h),
        "variance_term": rows_of(&gk.variance_term),
        "truncation_lag": gk.truncation_lag,
        "max_lag": max_lag,
        "plateau": gk.plateau,
        "coverage": cov.coverage,
        "nominal": cov.nominal,
        "chi_square_threshold": cov.threshold,
    });
    r.sink.json("clt.json", &out)?;
    Ok(())
}

fn coupling_stage<K>(r: &mut Runner<'_>, kernel: &K, map: &dyn UpdateMap<K::State>, setup: &Setup) -> StageResult<()>
where
    K: ControlledKernel,
    K::State: Send + Sync,
{
    let cfg = r.config;
    let alpha = cfg.coupling_alpha();
    let steps = cfg.coupling_steps();
    let key = derive_key(cfg.seed, label("coupling"));
    let (x0, x1) = match kernel.states() {
        Some(s) => (s[0].clone(), s[s.len() - 1].clone()),
        None => {
            let mut rng = stream(key, u64::MAX);
            (kernel.random_state(&mut rng), kernel.random_state(&mut rng))
        }
    };
    let t0: Vec<f64> = setup.theta_star.iter().map(|t| t - 1.0).collect();
    let t1: Vec<f64> = setup.theta_star.iter().map(|t| t + 1.0).collect();
    let mut sc = SaConfig::new(alpha, steps, 0, key);
    sc.replica_count = cfg.tuning.coupling_pairs;
    sc.noise = cfg.problem.noise;
    r.seed("coupling", Some(alpha), key, sc.replica_count);
    let trace = run_coupled(&sc, map, kernel, (&t0, &x0), (&t1, &x1))?;
    let mut csv = Csv::new(&["step", "theta_sq", "state_sq", "joint_sq"]);
    for k in 0..trace.len() {
        csv.row(&[k.to_string(), num(trace.theta_sq[k]), num(trace.state_sq[k]), num(trace.joint_sq[k])]);
    }
    r.sink.csv("coupling.csv", csv)?;
    let fit = geometric_rate_fit(&trace)?;
    let tau = forgetting_rate(alpha, setup.mu_g, setup.rho_hat);
    let out = json!({
        "alpha": alpha,
        "pairs": trace.pairs,
        "steps": steps,
        "rate": fit.rate,
        "r_squared": fit.r_squared,
        "window": [fit.window.0, fit.window.1],
        "tau": tau,
        "mu_g": setup.mu_g,
        "rho_hat": setup.rho_hat,
        "rate_bound": -0.5 * tau,
        "within_bound": fit.rate <= -0.5 * tau,
        "met_fraction": trace.met_fraction(),
    });
    r.sink.json("coupling.json", &out)?;
    let mut series = Series::points("E d^2", trace.joint_sq.iter().enumerate().map(|(k, v)| (k as f64, *v)).collect());
    series.as_line = true;
    let plot = Plot {
        title: "Coupled-pair distance".into(),
        x_label: "step".into(),
        y_label: "mean squared distance".into(),
        log_x: false,
        log_y: true,
        series: vec![series],
    };
    r.sink.text("plots/coupling.svg", &plot.render())?;
    Ok(())
}

fn wd_stage<K>(r: &mut Runner<'_>, kernel: &K, map: &dyn UpdateMap<K::State>, setup: &Setup) -> StageResult<()>
where
    K: ControlledKernel,
    K::State: Send + Sync,
{
    let cfg = r.config;
    let t = &cfg.tuning;
    let ts = &setup.theta_star;
    let (sol, _, pi) = poisson_for_map(map, kernel, ts)?;
    let op = gateaux_derivative(kernel, ts, &sol, None)?;
    let radii = geometric_radii(t.wd_radius_max, t.wd_radius_min, t.wd_radius_count);
    let key = derive_key(cfg.seed, label("wd_scan"));
    r.seed("wd_scan", None, key, 1);
    let scan = wd_remainder_scan(kernel, ts, &sol, &op, &radii, key)?;
    let bop = bias_operator(&op.lambda_bar, &setup.jacobian_partial_matrix)?;
    let bounds = image_bounds(kernel, &sol, &decision_grid(ts, t.grid_radius))?;
    let mut csv = Csv::new(&["radius", "sup_remainder"]);
    for (rad, rem) in scan.radii.iter().zip(&scan.sup_remainders) {
        csv.row(&[num(*rad), num(*rem)]);
    }
    r.sink.csv("wd_scan.csv", csv)?;
    let out = json!({
        "theta_star": ts,
        "fitted_exponent": scan.fitted_exponent,
        "c_wd_hat": scan.c_wd_hat,
        "exact": scan.exact,
        "violation": scan.violation,
        "n_directions": scan.n_directions,
        "gateaux": {
            "lambda_bar": rows_of(&op.lambda_bar),
            "fd_steps": op.fd_steps,
            "richardson_error": op.richardson_error,
            "suspect_directions": op.suspect_directions,
        },
        "poisson": {
            "stationary_law": pi.iter().copied().collect::<Vec<_>>(),
            "g_hat": rows_of(&sol.values),
            "centering_residual": sol.centering_residual,
            "equation_residual": sol.equation_residual,
        },
        "bias_operator": {
            "matrix": rows_of(&bop.matrix),
            "min_singular_value": bop.min_singular_value,
            "invertible": bop.invertible,
        },
        "image_bounds": bounds,
    });
    r.sink.json("wd_scan.json", &out)?;
    let rows: Vec<ScalingRow> = scan
        .radii
        .iter()
        .zip(&scan.sup_remainders)
        .filter(|(_, v)| **v > 0.0)
        .map(|(a, v)| ScalingRow { alpha: *a, estimate: *v, std_error: 0.0, n_replicas: 1 })
        .collect();
    let fit = loglog_slope(&rows).ok().map(|f| (f.slope, f.intercept));
    let mut plot = scaling_plot("Linear-response remainder", "sup remainder", vec![("remainder", &rows, fit)]);
    plot.x_label = "radius".into();
    r.sink.text("plots/wd_scan.svg", &plot.render())?;
    Ok(())
}

fn decomposition_stage<K>(r: &mut Runner<'_>, kernel: &K, map: &dyn UpdateMap<K::State>, setup: &Setup) -> StageResult<()>
where
    K: ControlledKernel,
    K::State: Send + Sync,
{
    let cfg = r.config;
    let ts = &setup.theta_star;
    let (sol, _, _) = poisson_for_map(map, kernel, ts)?;
    let op = gateaux_derivative(kernel, ts, &sol, None)?;
    let jac = &setup.jacobian_partial_matrix;
    let bop = bias_operator(&op.lambda_bar, jac)?;
    let base_key = derive_key(cfg.seed, label("decomposition"));
    let x0 = kernel.initial_state();
    let per_replica = cfg.tuning.decomposition_samples.div_ceil(cfg.replicas) as u64;
    let mut per_alpha = Vec::new();
    let mut term_i_rows = Vec::new();
    let mut term_ii_rows = Vec::new();
    let mut iii_over_alpha = Vec::new();
    for (i, alpha) in cfg.decomposition_alphas().into_iter().enumerate() {
        let tau = forgetting_rate(alpha, setup.mu_g, setup.rho_hat);
        let burn_in = default_burn_in(tau, cfg.tuning.burn_in_factor)?;
        let gap = (4.0 / tau).ceil() as u64;
        let key = derive_key(base_key, i as u64);
        let mut sc = SaConfig::new(alpha, burn_in + gap * per_replica, burn_in, key);
        sc.replica_count = cfg.replicas;
        sc.noise = cfg.problem.noise;
        r.seed("decomposition", Some(alpha), key, cfg.replicas);
        let samples = collect_transition_samples(&sc, map, kernel, ts, &x0, gap)?;
        let dec = bias_term_decomposition(&samples, ts, &sol, &op, jac, map, kernel)?;
        let row = |t: &dsa_core::estimators::TermEstimate| {
            let (n, s) = norm_with_se(&t.mean, &t.std_error);
            ScalingRow { alpha, estimate: n, std_error: s, n_replicas: dec.n_samples }
        };
        term_i_rows.push(row(&dec.term_i));
        term_ii_rows.push(row(&dec.term_ii_fluct));
        iii_over_alpha.push((alpha, dec.term_iii.mean.iter().map(|v| v / alpha).collect::<Vec<_>>()));
        per_alpha.push(json!({ "alpha": alpha, "burn_in": burn_in, "gap": gap, "decomposition": dec }));
    }
    let fit_or_note = |rows: &[ScalingRow]| match loglog_slope(rows) {
        Ok(f) => json!({ "slope": f.slope, "slope_std_error": f.slope_std_error, "r_squared": f.r_squared }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let iii_change = {
        let mut sorted = iii_over_alpha.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.len() >= 2 {
            let (a, b) = (&sorted[0].1, &sorted[1].1);
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let base = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            if base > 0.0 {
                json!(diff / base)
            } else {
                Value::Null
            }
        } else {
            Value::Null
        }
    };
    let out = json!({
        "theta_star": ts,
        "jacobian_partial": setup.jacobian_partial,
        "lambda_bar": rows_of(&op.lambda_bar),
        "bias_operator": {
            "matrix": rows_of(&bop.matrix),
            "min_singular_value": bop.min_singular_value,
            "invertible": bop.invertible,
        },
        "per_alpha": per_alpha,
        "scaling": {
            "term_i": fit_or_note(&term_i_rows),
            "term_ii_fluct": fit_or_note(&term_ii_rows),
            "term_iii_over_alpha": iii_over_alpha.iter().map(|(a, v)| json!({ "alpha": a, "value": v })).collect::<Vec<_>>(),
            "term_iii_over_alpha_relative_change": iii_change,
        },
    });
    r.sink.json("decomposition.json", &out)?;
    Ok(())
}

//! Experiment configuration: TOML schema, defaults and validation.
//!
//! Parse errors carry the line reported by the TOML parser; invariant
//! violations are located by searching for the offending key in the source.

use std::path::{Path, PathBuf};

use dsa_core::engine::NoiseSpec;
use dsa_core::kernels::Response;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, FieldError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Bias,
    Moments,
    Rr,
    Clt,
    Coupling,
    WdScan,
    Decomposition,
}

impl Analysis {
    pub fn name(self) -> &'static str {
        match self {
            Analysis::Bias => "bias",
            Analysis::Moments => "moments",
            Analysis::Rr => "rr",
            Analysis::Clt => "clt",
            Analysis::Coupling => "coupling",
            Analysis::WdScan => "wd_scan",
            Analysis::Decomposition => "decomposition",
        }
    }
}

/// Kernel families available by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// Two states, `P = [[1-a, a], [b, 1-b]]`.
    Finite2 {
        a: Response,
        b: Response,
        #[serde(default)]
        weights: Vec<f64>,
    },
    ClippedAr {
        rho: f64,
        drift: Response,
        sigma: Response,
        clip: f64,
        #[serde(default)]
        weights: Vec<f64>,
    },
    ProjLangevin {
        eta: f64,
        lo: Vec<f64>,
        hi: Vec<f64>,
        stiffness: Vec<f64>,
        centers: Vec<Response>,
        #[serde(default)]
        weights: Vec<f64>,
    },
    RwMh {
        dim: usize,
        proposal_scale: f64,
        center: Response,
        target_scale: f64,
        #[serde(default)]
        weights: Vec<f64>,
    },
}

pub const KERNEL_NAMES: [&str; 4] = ["finite2", "clipped_ar", "proj_langevin", "rw_mh"];
pub const MAP_NAMES: [&str; 3] = ["linear_hx", "scalar_tanh_mix", "table"];

impl KernelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Finite2 { .. } => "finite2",
            KernelSpec::ClippedAr { .. } => "clipped_ar",
            KernelSpec::ProjLangevin { .. } => "proj_langevin",
            KernelSpec::RwMh { .. } => "rw_mh",
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, KernelSpec::Finite2 { .. })
    }

    /// Number of states for finite kernels.
    pub fn n_states(&self) -> Option<usize> {
        self.is_finite().then_some(2)
    }

    /// Dimension of a continuous state.
    pub fn state_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Finite2 { .. } => None,
            KernelSpec::ClippedAr { .. } => Some(1),
            KernelSpec::ProjLangevin { lo, .. } => Some(lo.len()),
            KernelSpec::RwMh { dim, .. } => Some(*dim),
        }
    }

    fn weights(&self) -> &[f64] {
        match self {
            KernelSpec::Finite2 { weights, .. }
            | KernelSpec::ClippedAr { weights, .. }
            | KernelSpec::ProjLangevin { weights, .. }
            | KernelSpec::RwMh { weights, .. } => weights,
        }
    }
}

/// Update maps available by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// `g = A theta + h(x)`. `a` defaults to `-I`; `h` is a per-state table on
    /// finite kernels and the identity on continuous ones.
    LinearHx {
        #[serde(default)]
        a: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        h: Option<Vec<Vec<f64>>>,
    },
    /// `g = h(x) - kappa(x) theta - gamma tanh(theta / scale)`, scalar `theta`.
    ScalarTanhMix { h: Vec<f64>, kappa: Vec<f64>, gamma: f64, scale: f64 },
    /// Piecewise-linear `g(., x)` through `values[x]` on `grid`.
    Table { grid: Vec<f64>, values: Vec<Vec<f64>> },
}

impl MapSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MapSpec::LinearHx { .. } => "linear_hx",
            MapSpec::ScalarTanhMix { .. } => "scalar_tanh_mix",
            MapSpec::Table { .. } => "table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kernel: KernelSpec,
    pub map: MapSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
}

/// Optional knobs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tuning {
    /// Starting point of the root search.
    pub theta0: Option<Vec<f64>>,
    /// Burn-in is `ceil(burn_in_factor / tau(alpha))`.
    pub burn_in_factor: f64,
    /// Coupled pairs sampled for the kernel contraction estimate.
    pub diagnostic_pairs: usize,
    /// Half-width of the decision grid used for monotonicity and Lipschitz estimates.
    pub grid_radius: f64,
    pub coupling_alpha: Option<f64>,
    pub coupling_pairs: usize,
    /// Defaults to `max(100, ceil(100 / coupling_alpha))`.
    pub coupling_steps: Option<u64>,
    pub clt_alpha: f64,
    pub clt_replicas: usize,
    pub clt_steps: u64,
    /// Independent chains pooled for the Green–Kubo covariance.
    pub clt_covariance_chains: usize,
    pub clt_nominal: f64,
    /// Defaults to `alphas`.
    pub decomposition_alphas: Option<Vec<f64>>,
    pub decomposition_samples: usize,
    pub wd_radius_max: f64,
    pub wd_radius_min: f64,
    pub wd_radius_count: usize,
    /// Per-step simulation budget for Monte Carlo mean fields (continuous kernels).
    pub mc_steps: u64,
}

impl Default for Tuning {
    fn default() -> Self {
        Tuning {
            theta0: None,
            burn_in_factor: dsa_core::engine::BURN_IN_FACTOR,
            diagnostic_pairs: 400,
            grid_radius: 1.0,
            coupling_alpha: None,
            coupling_pairs: 256,
            coupling_steps: None,
            clt_alpha: 0.02,
            clt_replicas: 500,
            clt_steps: 100_000,
            clt_covariance_chains: 20,
            clt_nominal: 0.95,
            decomposition_alphas: None,
            decomposition_samples: 20_000,
            wd_radius_max: 1e-1,
            wd_radius_min: 1e-4,
            wd_radius_count: 13,
            mc_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub alphas: Vec<f64>,
    /// Post-burn-in steps per replica are `steps_per_unit_alpha / alpha`.
    pub steps_per_unit_alpha: u64,
    pub replicas: usize,
    #[serde(default)]
    pub analyses: Vec<Analysis>,
    pub output_dir: PathBuf,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub tuning: Tuning,
}

impl ExperimentConfig {
    pub fn wants(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }

    /// Decision dimension implied by the map (and, for continuous kernels, the state).
    pub fn theta_dim(&self) -> usize {
        match &self.problem.map {
            MapSpec::ScalarTanhMix { .. } | MapSpec::Table { .. } => 1,
            MapSpec::LinearHx { a, h } => {
                if let Some(a) = a {
                    a.len()
                } else if let Some(h) = h {
                    h.first().map_or(0, Vec::len)
                } else {
                    self.problem.kernel.state_dim().unwrap_or(0)
                }
            }
        }
    }

    /// Post-burn-in steps at `alpha`.
    pub fn steps_at(&self, alpha: f64) -> u64 {
        (self.steps_per_unit_alpha as f64 / alpha).round() as u64
    }

    pub fn coupling_alpha(&self) -> f64 {
        self.tuning.coupling_alpha.unwrap_or_else(|| self.alphas.first().copied().unwrap_or(0.1))
    }

    pub fn coupling_steps(&self) -> u64 {
        self.tuning.coupling_steps.unwrap_or_else(|| ((100.0 / self.coupling_alpha()).ceil() as u64).max(100))
    }

    pub fn decomposition_alphas(&self) -> Vec<f64> {
        self.tuning.decomposition_alphas.clone().unwrap_or_else(|| self.alphas.clone())
    }

    /// Parses TOML text and checks every invariant; `source` feeds line lookups.
    pub fn from_toml(source: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(source, s.start));
            ConfigError::Parse { line, message: e.message().to_string() }
        })?;
        let errors = config.check();
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Invalid(errors.into_iter().map(|e| e.locate(source)).collect()))
        }
    }

    /// Validates an already-deserialized configuration (no line information).
    pub fn validate(&self) -> Result<(), ConfigError> {
        let errors = self.check();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// Every invariant violation, in a stable order.
    pub fn check(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, msg: String| errs.push(FieldError::new(field, msg));

        if self.alphas.is_empty() {
            err("alphas", "need at least one step size".into());
        }
        for (i, a) in self.alphas.iter().enumerate() {
            if !(*a > 0.0 && *a <= 1.0) {
                err("alphas", format!("alphas[{i}] = {a} must lie in (0, 1]"));
            }
        }
        if self.alphas.windows(2).any(|w| !(w[0] > w[1])) {
            err("alphas", "alphas must be strictly decreasing".into());
        }
        if self.steps_per_unit_alpha == 0 {
            err("steps_per_unit_alpha", "must be positive".into());
        }
        if self.replicas == 0 {
            err("replicas", "need at least one replica".into());
        }
        for a in [Analysis::Bias, Analysis::Moments, Analysis::Rr, Analysis::Clt, Analysis::Decomposition] {
            if self.wants(a) && self.replicas < 2 {
                err("replicas", format!("{} requires replicas ≥ 2", a.name()));
            }
        }
        for a in [Analysis::Bias, Analysis::Moments] {
            if self.wants(a) && self.alphas.len() < 3 {
                err("alphas", format!("{} needs at least 3 step sizes for a scaling fit", a.name()));
            }
        }
        if self.wants(Analysis::Rr) && rr_pairs(&self.alphas).len() < 3 {
            err("alphas", "rr needs at least three pairs (alpha, 2 alpha) in the grid for a scaling fit".into());
        }
        let mut seen = self.analyses.clone();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            err("analyses", "analyses must not repeat".into());
        }
        for a in [Analysis::WdScan, Analysis::Decomposition] {
            if self.wants(a) && !self.problem.kernel.is_finite() {
                err(
                    "analyses",
                    format!("{} requires a finite kernel, got {}", a.name(), self.problem.kernel.name()),
                );
            }
        }
        drop(err);
        self.check_problem(&mut errs);
        self.check_tuning(&mut errs);
        errs
    }

    fn check_problem(&self, errs: &mut Vec<FieldError>) {
        let kernel = &self.problem.kernel;
        let d = self.theta_dim();
        if d == 0 {
            errs.push(FieldError::new("problem.map", "cannot infer the decision dimension".into()));
            return;
        }
        let w = kernel.weights();
        if !w.is_empty() && w.len() != d {
            errs.push(FieldError::new(
                "problem.kernel.weights",
                format!("length {} does not match decision dimension {d}", w.len()),
            ));
        }
        match &self.problem.map {
            MapSpec::LinearHx { a, h } => {
                if let Some(a) = a {
                    if a.iter().any(|row| row.len() != d) {
                        errs.push(FieldError::new("problem.map.a", format!("must be a {d}x{d} matrix")));
                    }
                }
                match (kernel.n_states(), h) {
                    (Some(n), Some(h)) => {
                        if h.len() != n || h.iter().any(|r| r.len() != d) {
                            errs.push(FieldError::new(
                                "problem.map.h",
                                format!("needs {n} rows (one per state) of length {d}"),
                            ));
                        }
                    }
                    (Some(_), None) => errs.push(FieldError::new(
                        "problem.map.h",
                        "finite kernels need a per-state table h".into(),
                    )),
                    (None, Some(_)) => errs.push(FieldError::new(
                        "problem.map.h",
                        "continuous kernels use h(x) = x; remove h".into(),
                    )),
                    (None, None) => {
                        if kernel.state_dim() != Some(d) {
                            errs.push(FieldError::new(
                                "problem.map.a",
                                format!(
                                    "decision dimension {d} must equal the state dimension {}",
                                    kernel.state_dim().unwrap_or(0)
                                ),
                            ));
                        }
                    }
                }
            }
            MapSpec::ScalarTanhMix { h, kappa, .. } => match kernel.n_states() {
                Some(n) => {
                    if h.len() != n || kappa.len() != n {
                        errs.push(FieldError::new("problem.map.h", format!("h and kappa need {n} entries")));
                    }
                }
                None => errs.push(FieldError::new(
                    "problem.map.name",
                    "scalar_tanh_mix requires a finite kernel".into(),
                )),
            },
            MapSpec::Table { values, .. } => match kernel.n_states() {
                Some(n) => {
                    if values.len() != n {
                        errs.push(FieldError::new("problem.map.values", format!("needs {n} rows (one per state)")));
                    }
                }
                None => errs.push(FieldError::new("problem.map.name", "table requires a finite kernel".into())),
            },
        }
        if let Err(e) = self.problem.noise.validate() {
            errs.push(FieldError::from_core("problem.noise", &e));
        }
        // Constructing the objects runs the remaining parameter checks.
        if errs.is_empty() {
            if let Err(e) = crate::registry::check_problem(&self.problem, d) {
                errs.push(e);
            }
        }
    }

    fn check_tuning(&self, errs: &mut Vec<FieldError>) {
        let t = &self.tuning;
        let mut err = |field: &str, msg: String| errs.push(FieldError::new(&format!("tuning.{field}"), msg));
        if let Some(t0) = &t.theta0 {
            if t0.len() != self.theta_dim() {
                err("theta0", format!("length {} does not match decision dimension {}", t0.len(), self.theta_dim()));
            }
        }
        if !(t.burn_in_factor > 0.0) {
            err("burn_in_factor", "must be positive".into());
        }
        if t.diagnostic_pairs < 100 {
            err("diagnostic_pairs", "need at least 100".into());
        }
        if !(t.grid_radius > 0.0) {
            err("grid_radius", "must be positive".into());
        }
        if let Some(a) = t.coupling_alpha {
            if !(a > 0.0 && a <= 1.0) {
                err("coupling_alpha", format!("{a} must lie in (0, 1]"));
            }
        }
        if t.coupling_pairs == 0 {
            err("coupling_pairs", "must be positive".into());
        }
        if t.coupling_steps.is_some_and(|s| s < 100) {
            err("coupling_steps", "need at least 100 steps".into());
        }
        if self.wants(Analysis::Clt) {
            if !(t.clt_alpha > 0.0 && t.clt_alpha <= 1.0) {
                err("clt_alpha", format!("{} must lie in (0, 1]", t.clt_alpha));
            }
            if t.clt_replicas < 200 {
                err("clt_replicas", "coverage needs at least 200 replicas".into());
            }
            if t.clt_steps < 5000 {
                err("clt_steps", "need at least 5000 steps".into());
            }
            if t.clt_covariance_chains == 0 {
                err("clt_covariance_chains", "must be positive".into());
            }
            if !(t.clt_nominal > 0.0 && t.clt_nominal < 1.0) {
                err("clt_nominal", "must lie in (0, 1)".into());
            }
        }
        if let Some(a) = &t.decomposition_alphas {
            if a.is_empty() || a.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                err("decomposition_alphas", "need step sizes in (0, 1]".into());
            }
        }
        if t.decomposition_samples < 2 {
            err("decomposition_samples", "need at least 2 samples".into());
        }
        if !(t.wd_radius_max > t.wd_radius_min && t.wd_radius_min > 0.0) {
            err("wd_radius_min", "need 0 < wd_radius_min < wd_radius_max".into());
        }
        if t.wd_radius_count < 2 {
            err("wd_radius_count", "need at least 2 radii".into());
        }
        if t.mc_steps < 1000 {
            err("mc_steps", "need at least 1000 steps".into());
        }
    }
}

/// Indices `(i, j)` with `alphas[j] == 2 alphas[i]`.
pub fn rr_pairs(alphas: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in alphas.iter().enumerate() {
        if let Some(j) = alphas.iter().position(|b| (b - 2.0 * a).abs() <= 1e-12 * b.abs()) {
            out.push((i, j));
        }
    }
    out
}

/// Reads and validates a TOML config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let source = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    ExperimentConfig::from_toml(&source)
}

fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside the table named by the dotted prefix of `field`.
///
/// `tuning.clt_steps` looks for `clt_steps` under `[tuning]`; `alphas` looks
/// at top level. Inline-table and dotted-key forms are matched too.
pub(crate) fn locate_field(source: &str, field: &str) -> Option<usize> {
    let field = field.split('[').next().unwrap_or(field);
    let (table, key) = match field.rsplit_once('.') {
        Some((t, k)) => (t, k),
        None => ("", field),
    };
    let mut current = String::new();
    let mut table_line = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.starts_with('[') && line.ends_with(']') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == table {
                table_line = Some(i + 1);
            }
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        let full = if current.is_empty() { lhs.to_string() } else { format!("{current}.{lhs}") };
        if full == field || (current == table && lhs == key) {
            return Some(i + 1);
        }
    }
    table_line
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SHIPPED: &str = include_str!("../examples/finite2_bias.cfg");

    #[test]
    fn shipped_config_is_valid() {
        let c = ExperimentConfig::from_toml(SHIPPED).unwrap();
        assert_eq!(c.alphas, vec![0.04, 0.02, 0.01, 0.005]);
        assert_eq!(c.theta_dim(), 1);
        assert_eq!(c.steps_at(0.005), 40_000_000);
        assert_eq!(rr_pairs(&c.alphas), vec![(1, 0), (2, 1), (3, 2)]);
    }

    fn with(src: &str, from: &str, to: &str) -> String {
        assert!(src.contains(from), "{from}");
        src.replacen(from, to, 1)
    }

    fn field_errors(src: &str) -> Vec<FieldError> {
        match ExperimentConfig::from_toml(src) {
            Err(ConfigError::Invalid(e)) => e,
            other => panic!("expected field errors, got {other:?}"),
        }
    }

    #[test]
    fn increasing_alphas_name_the_field_and_line() {
        let src = with(SHIPPED, "alphas = [0.04, 0.02, 0.01, 0.005]", "alphas = [0.005, 0.01, 0.02, 0.04]");
        let errs = field_errors(&src);
        assert_eq!(errs[0].field, "alphas");
        let line = src.lines().position(|l| l.starts_with("alphas")).unwrap() + 1;
        assert_eq!(errs[0].line, Some(line));
    }

    #[test]
    fn bias_needs_replicas() {
        let src = with(SHIPPED, "replicas = 64", "replicas = 1");
        let errs = field_errors(&src);
        assert!(errs.iter().any(|e| e.message.contains("bias requires replicas ≥ 2")), "{errs:?}");
    }

    #[test]
    fn unknown_kernel_lists_builtins() {
        let src = with(SHIPPED, "name = \"finite2\"", "name = \"finite3\"");
        match ExperimentConfig::from_toml(&src) {
            Err(ConfigError::Parse { line, message }) => {
                assert!(line.is_some());
                for k in KERNEL_NAMES {
                    assert!(message.contains(k), "{message}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let src = "seed = 1\nalphas = [0.1,\n";
        match ExperimentConfig::from_toml(src) {
            Err(ConfigError::Parse { line, .. }) => assert!(line.is_some()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn finite_only_analyses_rejected_for_continuous_kernels() {
        let src = r#"
seed = 1
alphas = [0.1, 0.05, 0.025]
steps_per_unit_alpha = 100
replicas = 4
analyses = ["wd_scan"]
output_dir = "out"

[problem.kernel]
name = "clipped_ar"
rho = 0.5
drift = { shape = "constant", value = 0.0 }
sigma = { shape = "constant", value = 1.0 }
clip = 3.0

[problem.map]
name = "linear_hx"
"#;
        let errs = field_errors(src);
        assert_eq!(errs[0].field, "analyses");
        assert_eq!(errs[0].line, Some(6));
    }

    #[test]
    fn tuning_errors_are_located() {
        let src = format!("{SHIPPED}\n[tuning]\nclt_replicas = 10\n");
        let src = with(&src, "analyses = [", "analyses = [\"clt\", ");
        let errs = field_errors(&src);
        let e = errs.iter().find(|e| e.field == "tuning.clt_replicas").unwrap();
        assert_eq!(e.line, Some(src.lines().position(|l| l.starts_with("clt_replicas")).unwrap() + 1));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = with(SHIPPED, "replicas = 64", "replicas = 64\nreplcas = 3");
        assert!(matches!(ExperimentConfig::from_toml(&src), Err(ConfigError::Parse { .. })));
    }
}

//! From raw simulation output to the quantitative claims: scaling exponents,
//! Richardson–Romberg extrapolation, Green–Kubo covariances and CLT coverage,
//! geometric forgetting rates and the bias-term decomposition.

mod decomposition;
mod green_kubo;
mod rate;
mod scaling;

pub use decomposition::{
    bias_term_decomposition, collect_transition_samples, BiasTermDecomposition, TermEstimate, TransitionSample,
};
pub use green_kubo::{clt_coverage, green_kubo, green_kubo_pooled, CoverageResult, GreenKuboEstimate};
pub use rate::{geometric_rate_fit, RateFit};
pub use scaling::{
    bias_estimate, loglog_slope, rr_extrapolate, scaling_report, BiasEstimate, ScalingReport, ScalingRow, SlopeFit,
};

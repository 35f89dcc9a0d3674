//! Standard errors and confidence intervals.

mod bootstrap;
mod sandwich;

pub use bootstrap::{bootstrap, bootstrap_methods, BootstrapOptions, BootstrapResult};
pub use sandwich::{
    arm_cumhaz_at_followup, cipwr_sandwich, finite_difference_check, weighted_outcome_score, BlockCheck,
    InfluenceComponents, SandwichResult,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiStyle {
    #[default]
    Wald,
    Percentile,
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `estimate -/+ z_{(1+level)/2} se`.
pub fn wald_ci(estimate: f64, se: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile(0.5 + level / 2.0);
    (estimate - z * se, estimate + z * se)
}

use rand::Rng;
use rayon::prelude::*;

use super::{wald_ci, CiStyle};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{quantity_labels, quantity_values, Method};
use crate::linalg::compensated_sum;
use crate::pipeline::PipelineConfig;
use crate::seeding::{stream, with_threads};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    pub ci: CiStyle,
    /// Worker count; `None` uses the global pool. Never affects results.
    pub threads: Option<usize>,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replicates: 200,
            seed: 0,
            level: 0.95,
            ci: CiStyle::Wald,
            threads: None,
        }
    }
}

/// Per-quantity bootstrap summaries, in [`quantity_labels`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub method: Method,
    pub labels: Vec<String>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub replicates_used: usize,
    pub failures: Vec<String>,
}

/// Resampled row indices for replicate `b`.
fn resample(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = stream(seed, b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Nonparametric bootstrap of one estimator; every replicate refits all
/// nuisance and outcome models.
pub fn bootstrap(ds: &Dataset, pipeline: &PipelineConfig, method: Method, opts: &BootstrapOptions) -> Result<BootstrapResult> {
    bootstrap_methods(ds, pipeline, &[method], opts).remove(0).1
}

/// Bootstrap several estimators on the same resamples.
pub fn bootstrap_methods(
    ds: &Dataset,
    pipeline: &PipelineConfig,
    methods: &[Method],
    opts: &BootstrapOptions,
) -> Vec<(Method, Result<BootstrapResult>)> {
    if opts.replicates < 2 {
        return methods
            .iter()
            .map(|&m| (m, Err(Error::Dimension("bootstrap needs at least 2 replicates".into()))))
            .collect();
    }
    let full = pipeline.estimate_all(ds, methods);
    let n = ds.len();
    let reps: Vec<Vec<std::result::Result<Vec<f64>, String>>> = with_threads(opts.threads, || {
        (0..opts.replicates)
            .into_par_iter()
            .map(|b| {
                let idx = resample(n, opts.seed, b);
                match ds.subset(&idx) {
                    Ok(sub) => pipeline
                        .estimate_all(&sub, methods)
                        .into_iter()
                        .map(|(_, r)| r.map(|e| quantity_values(&e.arm_survival)).map_err(|e| e.to_string()))
                        .collect(),
                    Err(e) => methods.iter().map(|_| Err(e.to_string())).collect(),
                }
            })
            .collect()
    });

    full.into_iter()
        .enumerate()
        .map(|(k, (m, point))| {
            let res = point.and_then(|point| {
                let mut ok = Vec::new();
                let mut failures = Vec::new();
                for (b, rep) in reps.iter().enumerate() {
                    match &rep[k] {
                        Ok(v) => ok.push(v.clone()),
                        Err(e) => failures.push(format!("replicate {b}: {e}")),
                    }
                }
                summarize(m, ds.num_arms(), &quantity_values(&point.arm_survival), &ok, failures, opts)
            });
            (m, res)
        })
        .collect()
}

fn summarize(
    method: Method,
    num_arms: usize,
    estimate: &[f64],
    reps: &[Vec<f64>],
    failures: Vec<String>,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    let total = reps.len() + failures.len();
    if failures.len() as f64 > MAX_FAILURE_SHARE * total as f64 || reps.len() < 2 {
        return Err(Error::BootstrapDegenerate {
            failed: failures.len(),
            total,
            failures,
        });
    }
    let q = estimate.len();
    let b = reps.len() as f64;
    let mut se = Vec::with_capacity(q);
    let mut lo = Vec::with_capacity(q);
    let mut hi = Vec::with_capacity(q);
    for c in 0..q {
        let vals: Vec<f64> = reps.iter().map(|r| r[c]).collect();
        let mean = compensated_sum(vals.iter().copied()) / b;
        let var = compensated_sum(vals.iter().map(|v| (v - mean) * (v - mean))) / (b - 1.0);
        let s = var.sqrt();
        let (l, h) = match opts.ci {
            CiStyle::Wald => wald_ci(estimate[c], s, opts.level),
            CiStyle::Percentile => {
                let mut sorted = vals;
                sorted.sort_by(f64::total_cmp);
                let alpha = (1.0 - opts.level) / 2.0;
                (quantile(&sorted, alpha), quantile(&sorted, 1.0 - alpha))
            }
        };
        se.push(s);
        lo.push(l);
        hi.push(h);
    }
    Ok(BootstrapResult {
        method,
        labels: quantity_labels(num_arms),
        estimate: estimate.to_vec(),
        se,
        ci_low: lo,
        ci_high: hi,
        replicates_used: reps.len(),
        failures,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

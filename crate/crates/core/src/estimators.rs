//! Arm-level survival estimators `mu_j = P(T^(j) >= d)` and the pairwise
//! risk-difference contrasts built from them.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{build_design, Dataset, Term};
use crate::error::{Error, Result};
use crate::glm::{fit_weighted_logistic, LogisticFit};
use crate::linalg::compensated_sum;
use crate::survival::{jackknife_pseudo, kaplan_meier, uncensored_probabilities, CensoringFit, StepFunction};

/// Uncensoring probabilities below this are clipped.
pub const UNCENSORED_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Ipw,
    Cipw,
    Cipwr,
    CaipwWang,
    PseudoIpw,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::Ipw,
        Method::Cipw,
        Method::Cipwr,
        Method::CaipwWang,
        Method::PseudoIpw,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Ipw => "ipw",
            Method::Cipw => "cipw",
            Method::Cipwr => "cipwr",
            Method::CaipwWang => "caipw_wang",
            Method::PseudoIpw => "pseudo_ipw",
        }
    }

    pub fn needs_propensity(&self) -> bool {
        !matches!(self, Method::Naive)
    }

    pub fn needs_censoring_model(&self) -> bool {
        matches!(self, Method::Cipw | Method::Cipwr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown estimator {s:?}"))
    }
}

/// Horvitz-Thompson (`n^-1 sum`) or Hajek (normalized by the weight sum).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    HorvitzThompson,
    Hajek,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Kish effective sample size of the weights used in each arm.
    pub effective_sample_size: Vec<f64>,
    pub min_weight: f64,
    pub max_weight: f64,
    /// Subjects whose uncensoring probability was raised to the floor.
    pub clipped: usize,
    /// Some arm estimate fell outside [0, 1] (reported unclipped).
    pub out_of_range: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub method: Method,
    pub arm_survival: Vec<f64>,
    pub arm_risk: Vec<f64>,
    /// Entry `(j, k)` is `risk_k - risk_j = mu_j - mu_k`.
    pub contrasts: DMatrix<f64>,
    pub outcome_fits: Option<Vec<LogisticFit>>,
    pub diagnostics: Diagnostics,
}

impl EstimateResult {
    fn new(method: Method, arm_survival: Vec<f64>, outcome_fits: Option<Vec<LogisticFit>>, mut diagnostics: Diagnostics) -> Self {
        diagnostics.out_of_range = arm_survival.iter().any(|m| !(0.0..=1.0).contains(m));
        Self {
            method,
            arm_risk: arm_survival.iter().map(|m| 1.0 - m).collect(),
            contrasts: contrasts_from_arms(&arm_survival),
            arm_survival,
            outcome_fits,
            diagnostics,
        }
    }

    /// Flat list of reported quantities: arm survivals then contrasts `j < k`.
    pub fn quantities(&self) -> Vec<(String, f64)> {
        quantity_labels(self.arm_survival.len())
            .into_iter()
            .zip(quantity_values(&self.arm_survival))
            .collect()
    }
}

/// Labels matching [`quantity_values`]: `mu_1..mu_J`, then `tau_1_2, ...`.
pub fn quantity_labels(num_arms: usize) -> Vec<String> {
    let mut out: Vec<String> = (1..=num_arms).map(|j| format!("mu_{j}")).collect();
    for j in 1..=num_arms {
        for k in j + 1..=num_arms {
            out.push(format!("tau_{j}_{k}"));
        }
    }
    out
}

pub fn quantity_values(arm_survival: &[f64]) -> Vec<f64> {
    let j = arm_survival.len();
    let mut out = arm_survival.to_vec();
    for a in 0..j {
        for b in a + 1..j {
            out.push(arm_survival[a] - arm_survival[b]);
        }
    }
    out
}

/// `tau(j, k) = (1 - mu_k) - (1 - mu_j)`.
pub fn contrasts_from_arms(arm_survival: &[f64]) -> DMatrix<f64> {
    let j = arm_survival.len();
    DMatrix::from_fn(j, j, |a, b| {
        if a == b {
            0.0
        } else {
            (1.0 - arm_survival[b]) - (1.0 - arm_survival[a])
        }
    })
}

fn kish(weights: impl Iterator<Item = f64>) -> f64 {
    let (s, s2) = weights.fold((0.0, 0.0), |(s, s2), w| (s + w, s2 + w * w));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

fn check_propensity(ds: &Dataset, propensity: &DMatrix<f64>) -> Result<()> {
    if propensity.nrows() != ds.len() || propensity.ncols() != ds.num_arms() {
        return Err(Error::Dimension(format!(
            "propensity is {}x{}, expected {}x{}",
            propensity.nrows(),
            propensity.ncols(),
            ds.len(),
            ds.num_arms()
        )));
    }
    if propensity.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Dimension("propensity entries must lie in (0, 1)".into()));
    }
    Ok(())
}

/// Complete-case arm means; ignores confounding and censoring.
pub fn estimate_naive(ds: &Dataset) -> Result<EstimateResult> {
    let mut mu = Vec::with_capacity(ds.num_arms());
    let mut ess = Vec::with_capacity(ds.num_arms());
    for arm in 1..=ds.num_arms() {
        let ys: Vec<f64> = ds
            .records()
            .iter()
            .filter(|r| r.arm == arm && r.response_observed)
            .map(|r| r.survival_value())
            .collect();
        if ys.is_empty() {
            return Err(Error::EmptyCell { arm });
        }
        mu.push(compensated_sum(ys.iter().copied()) / ys.len() as f64);
        ess.push(ys.len() as f64);
    }
    Ok(EstimateResult::new(
        Method::Naive,
        mu,
        None,
        Diagnostics {
            effective_sample_size: ess,
            min_weight: 1.0,
            max_weight: 1.0,
            ..Default::default()
        },
    ))
}

/// Per-subject inverse-probability weights `D_ij R_i / (pi_ij * p_i)` where
/// `p_i` is the (floored) probability of remaining uncensored.
pub(crate) fn horvitz_thompson(
    ds: &Dataset,
    propensity: &DMatrix<f64>,
    uncensored: &[f64],
    method: Method,
) -> Result<EstimateResult> {
    check_propensity(ds, propensity)?;
    let n = ds.len() as f64;
    let (probs, clipped) = floor_uncensored(uncensored);
    let mut mu = Vec::new();
    let mut ess = Vec::new();
    let mut wmin = f64::INFINITY;
    let mut wmax: f64 = 0.0;
    for arm in 1..=ds.num_arms() {
        let mut w = Vec::new();
        let mut terms = Vec::new();
        for (i, r) in ds.records().iter().enumerate() {
            if r.arm == arm && r.response_observed {
                let wi = 1.0 / (propensity[(i, arm - 1)] * probs[i]);
                w.push(wi);
                terms.push(wi * r.survival_value());
            }
        }
        for &x in &w {
            wmin = wmin.min(x);
            wmax = wmax.max(x);
        }
        ess.push(kish(w.iter().copied()));
        mu.push(compensated_sum(terms) / n);
    }
    Ok(EstimateResult::new(
        method,
        mu,
        None,
        Diagnostics {
            effective_sample_size: ess,
            min_weight: wmin,
            max_weight: wmax,
            clipped,
            out_of_range: false,
        },
    ))
}

fn floor_uncensored(p: &[f64]) -> (Vec<f64>, usize) {
    let mut clipped = 0;
    let out = p
        .iter()
        .map(|&x| {
            if x < UNCENSORED_FLOOR {
                clipped += 1;
                UNCENSORED_FLOOR
            } else {
                x
            }
        })
        .collect();
    (out, clipped)
}

/// `n^-1 sum_i D_ij R_i Ỹ_i / pi_ij`; ignores censoring.
pub fn estimate_ipw(ds: &Dataset, propensity: &DMatrix<f64>) -> Result<EstimateResult> {
    horvitz_thompson(ds, propensity, &vec![1.0; ds.len()], Method::Ipw)
}

/// `n^-1 sum_i D_ij R_i Ỹ_i / [pi_ij exp(-Lambda_ij(L_i))]`.
pub fn estimate_cipw(ds: &Dataset, propensity: &DMatrix<f64>, censoring: &[CensoringFit]) -> Result<EstimateResult> {
    let p = uncensored_probabilities(ds, censoring)?;
    horvitz_thompson(ds, propensity, &p, Method::Cipw)
}

/// Censoring fits with an identically zero cumulative hazard, one per arm.
pub fn no_censoring_fits(num_arms: usize) -> Vec<CensoringFit> {
    (1..=num_arms)
        .map(|arm| CensoringFit {
            arm,
            coefficients: nalgebra::DVector::zeros(0),
            baseline_cumhaz: StepFunction::new(vec![], vec![], 0.0),
            terms: vec![],
        })
        .collect()
}

/// Coarsening weights `D_ij R_i / [pi_ij exp(-Lambda_ij(L_i))]` for one arm.
pub fn cipwr_weights(ds: &Dataset, propensity: &DMatrix<f64>, uncensored: &[f64], arm: usize) -> Vec<f64> {
    ds.records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.arm == arm && r.response_observed {
                1.0 / (propensity[(i, arm - 1)] * uncensored[i].max(UNCENSORED_FLOOR))
            } else {
                0.0
            }
        })
        .collect()
}

/// Weighted logistic outcome model per arm, standardized over all subjects:
/// `mu_j = n^-1 sum_i expit(X_i' beta_j)`.
pub fn estimate_cipwr(
    ds: &Dataset,
    propensity: &DMatrix<f64>,
    censoring: &[CensoringFit],
    outcome_terms: &[Term],
) -> Result<EstimateResult> {
    let p = uncensored_probabilities(ds, censoring)?;
    let x = build_design(ds, outcome_terms)?;
    estimate_cipwr_with(ds, propensity, &p, &x)
}

/// [`estimate_cipwr`] on precomputed uncensoring probabilities and outcome design.
pub fn estimate_cipwr_with(
    ds: &Dataset,
    propensity: &DMatrix<f64>,
    uncensored: &[f64],
    x: &DMatrix<f64>,
) -> Result<EstimateResult> {
    check_propensity(ds, propensity)?;
    let y: Vec<f64> = ds.records().iter().map(|r| r.survival_value()).collect();
    let clipped = uncensored.iter().filter(|&&p| p < UNCENSORED_FLOOR).count();
    let mut mu = Vec::new();
    let mut fits = Vec::new();
    let mut ess = Vec::new();
    let mut wmin = f64::INFINITY;
    let mut wmax: f64 = 0.0;
    for arm in 1..=ds.num_arms() {
        let w = cipwr_weights(ds, propensity, uncensored, arm);
        if !w.iter().any(|&v| v > 0.0) {
            return Err(Error::EmptyCell { arm });
        }
        for &v in w.iter().filter(|&&v| v > 0.0) {
            wmin = wmin.min(v);
            wmax = wmax.max(v);
        }
        ess.push(kish(w.iter().copied()));
        let fit = fit_weighted_logistic(x, &y, &w).map_err(|e| e.with_arm(arm))?;
        let m = fit.predict(x)?;
        mu.push(compensated_sum(m.iter().copied()) / ds.len() as f64);
        fits.push(fit);
    }
    Ok(EstimateResult::new(
        Method::Cipwr,
        mu,
        Some(fits),
        Diagnostics {
            effective_sample_size: ess,
            min_weight: wmin,
            max_weight: wmax,
            clipped,
            out_of_range: false,
        },
    ))
}

/// Arm-specific Kaplan-Meier curves of the censoring time
/// (`min(T, C)` with `1 - Delta` as the event).
pub fn censoring_km_by_arm(ds: &Dataset) -> Vec<StepFunction> {
    (1..=ds.num_arms())
        .map(|arm| {
            let (t, s): (Vec<f64>, Vec<f64>) = ds
                .records()
                .iter()
                .filter(|r| r.arm == arm)
                .map(|r| (r.followup_time(), if r.event_by_obs { 0.0 } else { 1.0 }))
                .unzip();
            kaplan_meier(&t, &s)
        })
        .collect()
}

/// Augmented IPW with Kaplan-Meier censoring weights `R_i / K_{Z_i}(L_i-)`.
pub fn estimate_caipw_wang(ds: &Dataset, propensity: &DMatrix<f64>, outcome_terms: &[Term]) -> Result<EstimateResult> {
    check_propensity(ds, propensity)?;
    let km = censoring_km_by_arm(ds);
    let mut w = vec![0.0; ds.len()];
    let mut bad = Vec::new();
    for (i, r) in ds.records().iter().enumerate() {
        if r.response_observed {
            let k = km[r.arm - 1].eval_left(r.obs_time);
            if k <= 0.0 {
                bad.push(i);
            } else {
                w[i] = 1.0 / k;
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::Positivity { subjects: bad });
    }
    let x = build_design(ds, outcome_terms)?;
    let y: Vec<f64> = ds.records().iter().map(|r| r.survival_value()).collect();
    let wsum = compensated_sum(w.iter().copied());
    let mut mu = Vec::new();
    let mut fits = Vec::new();
    for arm in 1..=ds.num_arms() {
        let wa: Vec<f64> = ds
            .records()
            .iter()
            .zip(&w)
            .map(|(r, &wi)| if r.arm == arm { wi } else { 0.0 })
            .collect();
        if !wa.iter().any(|&v| v > 0.0) {
            return Err(Error::EmptyCell { arm });
        }
        let fit = fit_weighted_logistic(&x, &y, &wa).map_err(|e| e.with_arm(arm))?;
        let h = fit.predict(&x)?;
        let terms = ds.records().iter().enumerate().filter(|(i, _)| w[*i] > 0.0).map(|(i, r)| {
            let pi = propensity[(i, arm - 1)];
            let d = if r.arm == arm { 1.0 } else { 0.0 };
            w[i] * (d * y[i] / pi - (d - pi) / pi * h[i])
        });
        mu.push(compensated_sum(terms) / wsum);
        fits.push(fit);
    }
    let positive = w.iter().copied().filter(|&v| v > 0.0);
    let (wmin, wmax) = positive.fold((f64::INFINITY, 0.0_f64), |(a, b), v| (a.min(v), b.max(v)));
    let ess = (1..=ds.num_arms())
        .map(|arm| kish(ds.records().iter().zip(&w).filter(|(r, _)| r.arm == arm).map(|(_, &v)| v)))
        .collect();
    Ok(EstimateResult::new(
        Method::CaipwWang,
        mu,
        Some(fits),
        Diagnostics {
            effective_sample_size: ess,
            min_weight: wmin,
            max_weight: wmax,
            clipped: 0,
            out_of_range: false,
        },
    ))
}

/// Within-arm jackknife pseudo-observations for `P(T >= d)`, one per subject.
pub fn arm_pseudo_observations(ds: &Dataset) -> Result<Vec<f64>> {
    let mut theta = vec![0.0; ds.len()];
    for arm in 1..=ds.num_arms() {
        let idx = ds.arm_indices(arm);
        let (t, s): (Vec<f64>, Vec<f64>) = idx
            .iter()
            .map(|&i| {
                let r = &ds.records()[i];
                let event = r.event_by_obs && r.event_time.is_some_and(|t| t <= ds.horizon());
                (r.obs_time, if event { 1.0 } else { 0.0 })
            })
            .unzip();
        let th = jackknife_pseudo(&t, &s, ds.horizon())?;
        for (k, &i) in idx.iter().enumerate() {
            theta[i] = th[k];
        }
    }
    Ok(theta)
}

/// IPW applied to jackknife pseudo-observations.
pub fn estimate_pseudo_ipw(ds: &Dataset, propensity: &DMatrix<f64>, normalization: Normalization) -> Result<EstimateResult> {
    check_propensity(ds, propensity)?;
    let theta = arm_pseudo_observations(ds)?;
    let n = ds.len() as f64;
    let mut mu = Vec::new();
    let mut ess = Vec::new();
    let mut wmin = f64::INFINITY;
    let mut wmax: f64 = 0.0;
    for arm in 1..=ds.num_arms() {
        let idx = ds.arm_indices(arm);
        let w: Vec<f64> = idx.iter().map(|&i| 1.0 / propensity[(i, arm - 1)]).collect();
        for &v in &w {
            wmin = wmin.min(v);
            wmax = wmax.max(v);
        }
        let num = compensated_sum(idx.iter().zip(&w).map(|(&i, &wi)| wi * theta[i]));
        let denom = match normalization {
            Normalization::HorvitzThompson => n,
            Normalization::Hajek => compensated_sum(w.iter().copied()),
        };
        ess.push(kish(w.into_iter()));
        mu.push(num / denom);
    }
    Ok(EstimateResult::new(
        Method::PseudoIpw,
        mu,
        None,
        Diagnostics {
            effective_sample_size: ess,
            min_weight: wmin,
            max_weight: wmax,
            clipped: 0,
            out_of_range: false,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;

    fn rec(arm: usize, x: f64, t: Option<f64>, c: f64, d: f64) -> SubjectRecord {
        SubjectRecord::new(vec![x], arm, t, Some(c), d).unwrap()
    }

    #[test]
    fn naive_examples() {
        // survival indicators (1, 0, 1, 1) in arm 1
        let d = 10.0;
        let recs = vec![
            rec(1, 0.0, None, 20.0, d),
            rec(1, 0.0, Some(3.0), 20.0, d),
            rec(1, 0.0, Some(12.0), 20.0, d),
            rec(1, 0.0, None, 11.0, d),
            rec(2, 0.0, None, 20.0, d),
            rec(2, 0.0, None, 2.0, d),
        ];
        let ds = Dataset::new(recs, d, 2).unwrap();
        let est = estimate_naive(&ds).unwrap();
        assert!((est.arm_survival[0] - 0.75).abs() < 1e-15);
        assert!((est.arm_risk[0] - 0.25).abs() < 1e-15);
        // R = 0 record excluded
        assert_eq!(est.arm_survival[1], 1.0);
        let c = &est.contrasts;
        assert_eq!(c, &(-c.transpose()));
    }

    #[test]
    fn naive_empty_cell() {
        let d = 10.0;
        let ds = Dataset::new(vec![rec(1, 0.0, None, 20.0, d), rec(2, 0.0, None, 2.0, d)], d, 2).unwrap();
        assert!(matches!(estimate_naive(&ds).unwrap_err(), Error::EmptyCell { arm: 2 }));
    }

    #[test]
    fn ipw_direct_formula() {
        let d = 10.0;
        let ds = Dataset::new(vec![rec(1, 0.0, None, 20.0, d), rec(1, 0.0, None, 20.0, d), rec(2, 0.0, None, 2.0, d)], d, 2).unwrap();
        let pi = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.25, 0.75, 0.5, 0.5]);
        let est = estimate_ipw(&ds, &pi).unwrap();
        // (1/0.5 + 1/0.25) / 3
        assert!((est.arm_survival[0] - 2.0).abs() < 1e-15);
        assert!(est.diagnostics.out_of_range);
        // R = 0 contributes nothing
        assert_eq!(est.arm_survival[1], 0.0);
    }

    #[test]
    fn ipw_two_subject_example() {
        let d = 10.0;
        let recs = vec![rec(1, 0.0, None, 20.0, d), rec(1, 0.0, None, 20.0, d), rec(2, 0.0, None, 20.0, d)];
        let ds = Dataset::new(recs, d, 2).unwrap();
        let pi = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.25, 0.75, 0.5, 0.5]);
        let est = estimate_ipw(&ds, &pi).unwrap();
        // (1/0.5 + 1/0.25) / 3
        assert!((est.arm_survival[0] - 2.0).abs() < 1e-15);
        assert!(est.diagnostics.out_of_range);
    }

    #[test]
    fn contrasts_examples() {
        assert_eq!(contrasts_from_arms(&[0.5, 0.5]), DMatrix::zeros(2, 2));
        let c = contrasts_from_arms(&[0.36, 0.50, 0.63]);
        assert!((c[(0, 1)] + 0.14).abs() < 1e-12);
        assert_eq!(c[(1, 0)], -c[(0, 1)]);
        assert_eq!(quantity_labels(3), vec!["mu_1", "mu_2", "mu_3", "tau_1_2", "tau_1_3", "tau_2_3"]);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }

    fn binary_fixture() -> Dataset {
        // no censoring before the horizon, one binary covariate
        let d = 10.0;
        let cells: [(usize, f64, usize, usize); 4] = [(1, 0.0, 7, 3), (1, 1.0, 4, 6), (2, 0.0, 5, 5), (2, 1.0, 2, 9)];
        let mut recs = Vec::new();
        for (arm, x, surv, dead) in cells {
            for _ in 0..surv {
                recs.push(rec(arm, x, None, 50.0, d));
            }
            for k in 0..dead {
                recs.push(rec(arm, x, Some(1.0 + k as f64), 50.0, d));
            }
        }
        Dataset::new(recs, d, 2).unwrap()
    }

    fn arm_share_propensity(ds: &Dataset) -> DMatrix<f64> {
        let n = ds.len() as f64;
        let counts = ds.arm_counts();
        DMatrix::from_fn(ds.len(), ds.num_arms(), |_, j| counts[j] as f64 / n)
    }

    fn g_formula(ds: &Dataset) -> Vec<f64> {
        let n = ds.len() as f64;
        (1..=ds.num_arms())
            .map(|arm| {
                [0.0, 1.0]
                    .iter()
                    .map(|&x| {
                        let cell: Vec<_> = ds.records().iter().filter(|r| r.arm == arm && r.covariates[0] == x).collect();
                        let px = ds.records().iter().filter(|r| r.covariates[0] == x).count() as f64 / n;
                        px * cell.iter().map(|r| r.survival_value()).sum::<f64>() / cell.len() as f64
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn cipwr_matches_g_formula_with_saturated_model() {
        let ds = binary_fixture();
        let pi = arm_share_propensity(&ds);
        let est = estimate_cipwr(&ds, &pi, &no_censoring_fits(2), &[Term::Intercept, Term::Covariate(0)]).unwrap();
        for (a, b) in est.arm_survival.iter().zip(g_formula(&ds)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn intercept_only_cipwr_is_the_hajek_ratio() {
        let d = 10.0;
        let recs: Vec<SubjectRecord> = (0..40)
            .map(|i| {
                let t = if i % 3 == 0 { Some(2.0 + (i % 7) as f64) } else { None };
                rec(1 + i % 2, (i % 5) as f64, t, 6.0 + (i % 11) as f64, d)
            })
            .collect();
        let ds = Dataset::new(recs, d, 2).unwrap();
        let pi = DMatrix::from_fn(40, 2, |i, j| {
            let p = 0.3 + 0.4 * (i % 5) as f64 / 4.0;
            if j == 0 { p } else { 1.0 - p }
        });
        let uncensored: Vec<f64> = (0..40).map(|i| 0.5 + (i % 4) as f64 / 8.0).collect();
        let x = DMatrix::from_element(40, 1, 1.0);
        let est = estimate_cipwr_with(&ds, &pi, &uncensored, &x).unwrap();
        for arm in 1..=2 {
            let w = cipwr_weights(&ds, &pi, &uncensored, arm);
            let num: f64 = w.iter().zip(ds.records()).map(|(w, r)| w * r.survival_value()).sum();
            let den: f64 = w.iter().sum();
            assert!((est.arm_survival[arm - 1] - num / den).abs() < 1e-10);
        }
    }

    #[test]
    fn estimators_agree_without_censoring_and_constant_propensity() {
        let ds = binary_fixture();
        let pi = arm_share_propensity(&ds);
        let naive = estimate_naive(&ds).unwrap().arm_survival;
        let others = [
            estimate_ipw(&ds, &pi).unwrap().arm_survival,
            estimate_cipw(&ds, &pi, &no_censoring_fits(2)).unwrap().arm_survival,
            estimate_cipwr(&ds, &pi, &no_censoring_fits(2), &[Term::Intercept]).unwrap().arm_survival,
            estimate_pseudo_ipw(&ds, &pi, Normalization::HorvitzThompson).unwrap().arm_survival,
        ];
        for o in others {
            for (a, b) in naive.iter().zip(&o) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cipw_increases_with_censoring_hazard() {
        let ds = binary_fixture();
        let pi = arm_share_propensity(&ds);
        let fits = |lambda: f64| -> Vec<CensoringFit> {
            (1..=2)
                .map(|arm| CensoringFit {
                    arm,
                    coefficients: nalgebra::DVector::zeros(0),
                    baseline_cumhaz: StepFunction::new(vec![0.5], vec![lambda], 0.0),
                    terms: vec![],
                })
                .collect()
        };
        let mut last = estimate_cipw(&ds, &pi, &fits(0.0)).unwrap().arm_survival;
        assert_eq!(last, estimate_ipw(&ds, &pi).unwrap().arm_survival);
        for lambda in [0.1, 0.4, 1.0] {
            let cur = estimate_cipw(&ds, &pi, &fits(lambda)).unwrap().arm_survival;
            assert!(cur.iter().zip(&last).all(|(c, l)| c > l));
            last = cur;
        }
    }

    #[test]
    fn caipw_without_censoring_reduces_to_aipw() {
        let ds = binary_fixture();
        let pi = arm_share_propensity(&ds);
        let sat = estimate_caipw_wang(&ds, &pi, &[Term::Intercept, Term::Covariate(0)]).unwrap();
        for (a, b) in sat.arm_survival.iter().zip(g_formula(&ds)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        // constant h with arm-share propensity: the augmentation sums to zero
        let flat = estimate_caipw_wang(&ds, &pi, &[Term::Intercept]).unwrap();
        let naive = estimate_naive(&ds).unwrap();
        for (a, b) in flat.arm_survival.iter().zip(&naive.arm_survival) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_records_changes_nothing() {
        use crate::pipeline::PipelineConfig;
        use crate::simgen::{correct_designs, generate, ScenarioConfig, Setting};
        let mut cfg = ScenarioConfig::setting_one_weak();
        cfg.n = 400;
        let ds = generate(&cfg, 21).unwrap();
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.reverse();
        order.rotate_left(137);
        let shuffled = ds.subset(&order).unwrap();
        let pipeline = PipelineConfig::new(correct_designs(Setting::One));
        let a = pipeline.estimate_all(&ds, &Method::ALL);
        let b = pipeline.estimate_all(&shuffled, &Method::ALL);
        for ((m, ra), (_, rb)) in a.into_iter().zip(b) {
            let (ra, rb) = (ra.unwrap(), rb.unwrap());
            for (x, y) in ra.arm_survival.iter().zip(&rb.arm_survival) {
                assert!((x - y).abs() < 1e-12, "{m}: {x} vs {y}");
            }
        }
    }
}

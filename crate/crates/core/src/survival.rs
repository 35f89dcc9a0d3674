//! Survival primitives: step functions, Cox regression with the Breslow
//! baseline, Kaplan-Meier, jackknife pseudo-observations and the per-arm
//! censoring models used for inverse probability of censoring weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{build_design, Dataset, Term};
use crate::error::{Error, Result};
use crate::glm::SolverOptions;
use crate::linalg::{collinear_columns, max_abs, solve_spd};

/// Right-continuous step function.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    value_before_first: f64,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>, value_before_first: f64) -> Self {
        assert_eq!(knots.len(), values.len());
        debug_assert!(knots.windows(2).all(|w| w[0] < w[1]));
        Self {
            knots,
            values,
            value_before_first,
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_before_first(&self) -> f64 {
        self.value_before_first
    }

    /// Value at `t`, including a jump located exactly at `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.knots.partition_point(|&x| x <= t);
        if k == 0 {
            self.value_before_first
        } else {
            self.values[k - 1]
        }
    }

    /// Left limit at `t`, excluding a jump located exactly at `t`.
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.knots.partition_point(|&x| x < t);
        if k == 0 {
            self.value_before_first
        } else {
            self.values[k - 1]
        }
    }

    /// Jump sizes at each knot.
    pub fn increments(&self) -> Vec<f64> {
        let mut prev = self.value_before_first;
        self.values
            .iter()
            .map(|&v| {
                let d = v - prev;
                prev = v;
                d
            })
            .collect()
    }
}

/// Distinct times sorted descending, with the member indices of each.
fn descending_groups(time: &[f64]) -> Vec<(f64, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..time.len()).collect();
    idx.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some((t, members)) if *t == time[i] => members.push(i),
            _ => groups.push((time[i], vec![i])),
        }
    }
    groups
}

struct CoxSums {
    loglik: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
}

/// Breslow-tie partial likelihood, score and information in one sweep over
/// risk sets `{k : time_k >= t}`.
fn cox_sums(design: &DMatrix<f64>, time: &[f64], status: &[f64], gamma: &DVector<f64>) -> CoxSums {
    let p = design.ncols();
    let eta = design * gamma;
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(p);
    let mut s2 = DMatrix::<f64>::zeros(p, p);
    let mut out = CoxSums {
        loglik: 0.0,
        score: DVector::zeros(p),
        information: DMatrix::zeros(p, p),
    };
    for (_, members) in descending_groups(time) {
        for &i in &members {
            let r = (eta[i] - shift).exp();
            let w = design.row(i).transpose();
            s0 += r;
            s1.axpy(r, &w, 1.0);
            s2.ger(r, &w, &w, 1.0);
        }
        let mut d = 0.0;
        for &i in &members {
            if status[i] > 0.0 {
                d += 1.0;
                out.loglik += eta[i];
                out.score += design.row(i).transpose();
            }
        }
        if d > 0.0 {
            out.loglik -= d * (s0.ln() + shift);
            let wbar = &s1 / s0;
            out.score.axpy(-d, &wbar, 1.0);
            out.information += (&s2 / s0 - &wbar * wbar.transpose()) * d;
        }
    }
    out
}

pub fn cox_partial_loglik(design: &DMatrix<f64>, time: &[f64], status: &[f64], gamma: &DVector<f64>) -> f64 {
    cox_sums(design, time, status, gamma).loglik
}

pub fn cox_score(design: &DMatrix<f64>, time: &[f64], status: &[f64], gamma: &DVector<f64>) -> DVector<f64> {
    cox_sums(design, time, status, gamma).score
}

pub fn cox_information(design: &DMatrix<f64>, time: &[f64], status: &[f64], gamma: &DVector<f64>) -> DMatrix<f64> {
    cox_sums(design, time, status, gamma).information
}

/// Breslow cumulative baseline hazard: at each distinct event time the jump is
/// the number of events divided by `sum_{time_k >= t} exp(w_k' gamma)`.
pub fn breslow(design: &DMatrix<f64>, time: &[f64], status: &[f64], gamma: &DVector<f64>) -> StepFunction {
    let eta = design * gamma;
    let mut s0 = 0.0;
    let mut jumps = Vec::new();
    for (t, members) in descending_groups(time) {
        for &i in &members {
            s0 += eta[i].exp();
        }
        let d: f64 = members.iter().filter(|&&i| status[i] > 0.0).count() as f64;
        if d > 0.0 {
            jumps.push((t, d / s0));
        }
    }
    jumps.reverse();
    let mut cum = 0.0;
    let (knots, values) = jumps
        .into_iter()
        .map(|(t, j)| {
            cum += j;
            (t, cum)
        })
        .unzip();
    StepFunction::new(knots, values, 0.0)
}

/// Nelson-Aalen cumulative hazard (Breslow without covariates).
pub fn nelson_aalen(time: &[f64], status: &[f64]) -> StepFunction {
    breslow(&DMatrix::zeros(time.len(), 0), time, status, &DVector::zeros(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub coefficients: DVector<f64>,
    pub baseline_cumhaz: StepFunction,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
}

pub fn fit_cox(design: &DMatrix<f64>, time: &[f64], status: &[f64]) -> Result<CoxFit> {
    fit_cox_with(design, time, status, &SolverOptions::default())
}

/// Maximum partial likelihood by Newton-Raphson from zero with step-halving.
pub fn fit_cox_with(design: &DMatrix<f64>, time: &[f64], status: &[f64], opts: &SolverOptions) -> Result<CoxFit> {
    let n = design.nrows();
    if time.len() != n || status.len() != n {
        return Err(Error::Dimension(format!(
            "design has {n} rows, time {} and status {}",
            time.len(),
            status.len()
        )));
    }
    if time.iter().any(|t| t.is_nan()) {
        return Err(Error::Dimension("time contains NaN".into()));
    }
    if !status.iter().any(|&s| s > 0.0) {
        return Err(Error::NoEvents { arm: 0 });
    }
    let p = design.ncols();
    if p > 0 {
        let mut centered = design.clone();
        for mut c in centered.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
        }
        let bad = collinear_columns(&centered, 1e-9);
        if !bad.is_empty() {
            return Err(Error::Rank { columns: bad });
        }
    }

    let nf = n as f64;
    let mut gamma = DVector::zeros(p);
    let mut sums = cox_sums(design, time, status, &gamma);
    let mut iterations = 0;
    loop {
        let g = &sums.score / nf;
        let gnorm = max_abs(&g);
        let info = &sums.information / nf;
        let step = solve_spd(&info, &g);
        if gamma.norm() > opts.divergence_bound {
            return Err(Error::Separation {
                arm: None,
                reason: format!("coefficient norm exceeds {}", opts.divergence_bound),
            });
        }
        if gnorm <= opts.tol {
            if let Some(s) = &step {
                if max_abs(s) > 0.5 {
                    return Err(Error::Separation {
                        arm: None,
                        reason: "partial likelihood is monotone; a coefficient diverges".into(),
                    });
                }
            }
            if let Some(s) = step {
                gamma += s;
            }
            let baseline_cumhaz = breslow(design, time, status, &gamma);
            return Ok(CoxFit {
                coefficients: gamma,
                baseline_cumhaz,
                converged: true,
                iterations,
                final_gradient_norm: gnorm,
            });
        }
        if iterations == opts.max_iter {
            return Err(Error::Convergence {
                arm: None,
                iterations,
                gradient_norm: gnorm,
                last_iterate: gamma.iter().copied().collect(),
            });
        }
        let Some(step) = step else {
            return Err(Error::Separation {
                arm: None,
                reason: "partial-likelihood information became singular".into(),
            });
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand = &gamma + &step * t;
            let cs = cox_sums(design, time, status, &cand);
            if cs.loglik.is_finite() && cs.loglik >= sums.loglik - 1e-14 * sums.loglik.abs().max(1.0) {
                gamma = cand;
                sums = cs;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            return Err(Error::Convergence {
                arm: None,
                iterations,
                gradient_norm: gnorm,
                last_iterate: gamma.iter().copied().collect(),
            });
        }
    }
}

/// Product-limit survival curve with jumps at the distinct event times.
pub fn kaplan_meier(time: &[f64], status: &[f64]) -> StepFunction {
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut s = 1.0;
    let groups = descending_groups(time);
    let mut at_risk = time.len() as f64;
    for (t, members) in groups.into_iter().rev() {
        let d = members.iter().filter(|&&i| status[i] > 0.0).count() as f64;
        if d > 0.0 {
            s *= 1.0 - d / at_risk;
            knots.push(t);
            values.push(s);
        }
        at_risk -= members.len() as f64;
    }
    StepFunction::new(knots, values, 1.0)
}

/// Jackknife pseudo-observations `n S - (n-1) S^{-i}` for the survival
/// probability just before `horizon`, `S(horizon-) = P(T >= horizon)`.
///
/// Leave-one-out curves are evaluated in O(n log n) by combining prefix
/// products of the modified factors with suffix products of the originals.
pub fn jackknife_pseudo(time: &[f64], status: &[f64], horizon: f64) -> Result<Vec<f64>> {
    let n = time.len();
    if n < 2 {
        return Err(Error::Dimension("pseudo-observations need at least two subjects".into()));
    }
    if status.len() != n {
        return Err(Error::Dimension("time and status lengths differ".into()));
    }
    check_identified_at(time, status, horizon)?;

    // distinct event times strictly before the horizon, ascending
    let mut events: Vec<(f64, f64, f64)> = Vec::new(); // (t, d, n_at_risk)
    let mut at_risk = n as f64;
    for (t, members) in descending_groups(time).into_iter().rev() {
        if t >= horizon {
            break;
        }
        let d = members.iter().filter(|&&i| status[i] > 0.0).count() as f64;
        if d > 0.0 {
            events.push((t, d, at_risk));
        }
        at_risk -= members.len() as f64;
    }
    let k = events.len();
    let mut suffix = vec![1.0; k + 1];
    for m in (0..k).rev() {
        let (_, d, r) = events[m];
        suffix[m] = suffix[m + 1] * (1.0 - d / r);
    }
    let full = suffix[0];
    // prefix[m] = product over the first m factors with one subject removed from the risk set
    let mut prefix = vec![1.0; k + 1];
    for m in 0..k {
        let (_, d, r) = events[m];
        prefix[m + 1] = prefix[m] * (1.0 - d / (r - 1.0));
    }
    let nf = n as f64;
    Ok((0..n)
        .map(|i| {
            let ti = time[i];
            let below = events.partition_point(|e| e.0 < ti);
            let mut loo = prefix[below];
            let mut rest = below;
            if below < k && events[below].0 == ti {
                let (_, d, r) = events[below];
                let dd = if status[i] > 0.0 { d - 1.0 } else { d };
                if r > 1.0 {
                    loo *= 1.0 - dd / (r - 1.0);
                }
                rest += 1;
            }
            loo *= suffix[rest];
            nf * full - (nf - 1.0) * loo
        })
        .collect())
}

/// Kaplan-Meier survival strictly before `horizon`.
pub fn km_survival_before(time: &[f64], status: &[f64], horizon: f64) -> f64 {
    kaplan_meier(time, status).eval_left(horizon)
}

fn check_identified_at(time: &[f64], status: &[f64], horizon: f64) -> Result<()> {
    let last = time
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(status[a.0].total_cmp(&status[b.0])));
    if let Some((i, &t)) = last {
        if t < horizon && status[i] <= 0.0 {
            return Err(Error::UndefinedAtHorizon { horizon });
        }
    }
    Ok(())
}

/// Which times feed the censoring-time Cox model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// `(min(T, C), 1 - Delta)`: censoring is the event, event times censor it.
    #[default]
    Observation,
    /// `(C, 1)`: every recorded censoring time is an event.
    ObservedCensoring,
}

/// Per-subject `(time, status)` inputs for the censoring-time model.
pub fn censoring_data(ds: &Dataset, mode: TimeMode) -> Result<(Vec<f64>, Vec<f64>)> {
    match mode {
        TimeMode::Observation => Ok(ds
            .records()
            .iter()
            .map(|r| (r.followup_time(), if r.event_by_obs { 0.0 } else { 1.0 }))
            .unzip()),
        TimeMode::ObservedCensoring => {
            if !ds.censor_times_fully_observed() {
                return Err(Error::Mode);
            }
            Ok(ds
                .records()
                .iter()
                .map(|r| (r.censor_time.expect("checked"), 1.0))
                .unzip())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CensoringFit {
    pub arm: usize,
    pub coefficients: DVector<f64>,
    pub baseline_cumhaz: StepFunction,
    pub terms: Vec<Term>,
}

impl CensoringFit {
    pub fn cumhaz_at(&self, w_row: &[f64], t: f64) -> Result<f64> {
        cumhaz_at(self, w_row, t)
    }
}

/// `Lambda_0j(t) exp(w' gamma_j)`, right-continuous in `t`.
pub fn cumhaz_at(fit: &CensoringFit, w_row: &[f64], t: f64) -> Result<f64> {
    if w_row.len() != fit.coefficients.len() {
        return Err(Error::Dimension(format!(
            "covariate row has length {}, coefficients {}",
            w_row.len(),
            fit.coefficients.len()
        )));
    }
    let lp: f64 = w_row.iter().zip(fit.coefficients.iter()).map(|(a, b)| a * b).sum();
    Ok(fit.baseline_cumhaz.eval(t) * lp.exp())
}

/// Treatment-specific Cox models for the censoring time, one per arm.
pub fn fit_censoring_models(ds: &Dataset, terms: &[Term], mode: TimeMode) -> Result<Vec<CensoringFit>> {
    let w = build_design(ds, terms)?;
    let (time, status) = censoring_data(ds, mode)?;
    (1..=ds.num_arms())
        .map(|arm| {
            let idx = ds.arm_indices(arm);
            let wa = w.select_rows(&idx);
            let ta: Vec<f64> = idx.iter().map(|&i| time[i]).collect();
            let sa: Vec<f64> = idx.iter().map(|&i| status[i]).collect();
            let fit = fit_cox(&wa, &ta, &sa).map_err(|e| e.with_arm(arm))?;
            Ok(CensoringFit {
                arm,
                coefficients: fit.coefficients,
                baseline_cumhaz: fit.baseline_cumhaz,
                terms: terms.to_vec(),
            })
        })
        .collect()
}

/// `exp(-Lambda_{i,Z_i}(L_i))` for every subject.
pub fn uncensored_probabilities(ds: &Dataset, fits: &[CensoringFit]) -> Result<Vec<f64>> {
    let terms = fits.first().map(|f| f.terms.clone()).unwrap_or_default();
    let w = build_design(ds, &terms)?;
    ds.records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let fit = fits
                .iter()
                .find(|f| f.arm == r.arm)
                .ok_or_else(|| Error::Dimension(format!("no censoring fit for arm {}", r.arm)))?;
            let row: Vec<f64> = w.row(i).iter().copied().collect();
            Ok((-cumhaz_at(fit, &row, r.obs_time)?).exp())
        })
        .collect()
}

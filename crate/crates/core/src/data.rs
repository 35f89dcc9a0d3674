//! Subjects, datasets, design specifications and the coarsening indicators
//! derived from raw event and censoring times.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowViolation};

/// Observed-data summary of one subject at horizon `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coarsening {
    /// `min(T, C, d)`
    pub obs_time: f64,
    /// `T <= C`
    pub event_by_obs: bool,
    /// `C >= min(T, d)`
    pub response_observed: bool,
    /// `T >= d`, known only when the response is observed.
    pub survival_indicator: Option<bool>,
}

/// Derive the coarsening indicators for one subject.
///
/// An absent event time means no event was seen before censoring and is
/// treated as `+inf`. Ties `T == C` count as an event (`T <= C`).
pub fn derive_coarsening(event_time: Option<f64>, censor_time: f64, horizon: f64) -> Result<Coarsening> {
    let mut bad = Vec::new();
    if !(censor_time > 0.0) {
        bad.push(violation("censor_time must be positive"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        bad.push(violation("horizon must be positive and finite"));
    }
    if let Some(t) = event_time {
        if !(t > 0.0) || t.is_infinite() {
            bad.push(violation("event_time must be positive and finite"));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }

    let t = event_time.unwrap_or(f64::INFINITY);
    let obs_time = t.min(censor_time).min(horizon);
    let response_observed = censor_time >= t.min(horizon);
    Ok(Coarsening {
        obs_time,
        event_by_obs: t <= censor_time,
        response_observed,
        survival_indicator: response_observed.then_some(t >= horizon),
    })
}

fn violation(msg: &str) -> RowViolation {
    RowViolation {
        row: None,
        message: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub covariates: Vec<f64>,
    /// Treatment arm, 1-based.
    pub arm: usize,
    pub event_time: Option<f64>,
    /// `None` when the censoring time was not recorded (it is then only known
    /// to exceed the event time).
    pub censor_time: Option<f64>,
    pub obs_time: f64,
    pub event_by_obs: bool,
    pub response_observed: bool,
    pub survival_indicator: Option<bool>,
}

impl SubjectRecord {
    pub fn new(
        covariates: Vec<f64>,
        arm: usize,
        event_time: Option<f64>,
        censor_time: Option<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if let Some(c) = censor_time {
            if c.is_infinite() {
                return Err(Error::Validation(vec![violation("censor_time must be finite")]));
            }
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(vec![violation("covariates must be finite")]));
        }
        let c = derive_coarsening(event_time, censor_time.unwrap_or(f64::INFINITY), horizon)?;
        Ok(Self {
            covariates,
            arm,
            event_time,
            censor_time,
            obs_time: c.obs_time,
            event_by_obs: c.event_by_obs,
            response_observed: c.response_observed,
            survival_indicator: c.survival_indicator,
        })
    }

    /// `min(T, C)`, the observation time used by survival fits.
    pub fn followup_time(&self) -> f64 {
        let t = self.event_time.unwrap_or(f64::INFINITY);
        t.min(self.censor_time.unwrap_or(f64::INFINITY))
    }

    /// `Ỹ` as a number, zero when unobserved.
    pub fn survival_value(&self) -> f64 {
        match self.survival_indicator {
            Some(true) => 1.0,
            _ => 0.0,
        }
    }

    pub fn in_arm(&self, arm: usize) -> bool {
        self.arm == arm
    }
}

/// Unvalidated input row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawRow {
    pub covariates: Vec<f64>,
    pub arm: Option<usize>,
    pub event_time: Option<f64>,
    pub censor_time: Option<f64>,
    /// Optional per-row horizon; must agree with the dataset horizon.
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    horizon: f64,
    num_arms: usize,
    censor_times_fully_observed: bool,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>, horizon: f64, num_arms: usize) -> Result<Self> {
        let mut bad = Vec::new();
        if num_arms < 2 {
            bad.push(violation("at least two arms are required"));
        }
        let p = records.first().map(|r| r.covariates.len()).unwrap_or(0);
        let mut seen = vec![false; num_arms + 1];
        for (i, r) in records.iter().enumerate() {
            if r.arm == 0 || r.arm > num_arms {
                bad.push(RowViolation {
                    row: Some(i),
                    message: format!("arm {} outside 1..{num_arms}", r.arm),
                });
            } else {
                seen[r.arm] = true;
            }
            if r.covariates.len() != p {
                bad.push(RowViolation {
                    row: Some(i),
                    message: format!("expected {p} covariates, found {}", r.covariates.len()),
                });
            }
            if r.obs_time > horizon {
                bad.push(RowViolation {
                    row: Some(i),
                    message: "observation time exceeds horizon".into(),
                });
            }
        }
        for (arm, s) in seen.iter().enumerate().skip(1) {
            if !s {
                bad.push(violation(&format!("arm {arm} empty")));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        let censor_times_fully_observed = records.iter().all(|r| r.censor_time.is_some());
        Ok(Self {
            records,
            horizon,
            num_arms,
            censor_times_fully_observed,
        })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn num_covariates(&self) -> usize {
        self.records.first().map(|r| r.covariates.len()).unwrap_or(0)
    }

    pub fn censor_times_fully_observed(&self) -> bool {
        self.censor_times_fully_observed
    }

    /// Indices of the records in `arm` (1-based).
    pub fn arm_indices(&self, arm: usize) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].arm == arm).collect()
    }

    pub fn arm_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_arms];
        for r in &self.records {
            c[r.arm - 1] += 1;
        }
        c
    }

    /// New dataset made of the given records (with repetition allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let recs = indices.iter().map(|&i| self.records[i].clone()).collect();
        Dataset::new(recs, self.horizon, self.num_arms)
    }
}

/// Validate raw rows into a [`Dataset`], collecting every row-indexed violation.
pub fn validate_dataset(rows: &[RawRow], horizon: Option<f64>, num_arms: Option<usize>) -> Result<Dataset> {
    let mut bad = Vec::new();
    let horizon = match horizon.or_else(|| rows.iter().find_map(|r| r.horizon)) {
        Some(h) => h,
        None => {
            return Err(Error::Validation(vec![violation("horizon missing")]));
        }
    };
    let num_arms = num_arms.unwrap_or_else(|| rows.iter().filter_map(|r| r.arm).max().unwrap_or(0));
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if let Some(h) = row.horizon {
            if h != horizon {
                bad.push(RowViolation {
                    row: Some(i),
                    message: format!("inconsistent horizon {h} (expected {horizon})"),
                });
            }
        }
        let Some(arm) = row.arm else {
            bad.push(RowViolation {
                row: Some(i),
                message: "missing arm".into(),
            });
            continue;
        };
        if row.event_time.is_none() && row.censor_time.is_none() {
            bad.push(RowViolation {
                row: Some(i),
                message: "missing both event_time and censor_time".into(),
            });
            continue;
        }
        match SubjectRecord::new(row.covariates.clone(), arm, row.event_time, row.censor_time, horizon) {
            Ok(r) => records.push(r),
            Err(Error::Validation(vs)) => bad.extend(vs.into_iter().map(|v| RowViolation {
                row: Some(i),
                message: v.message,
            })),
            Err(e) => return Err(e),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    Dataset::new(records, horizon, num_arms)
}

/// One column of a design matrix, expressed over the raw covariates.
///
/// Text form uses 1-based covariate names: `1`, `x3`, `x1*x2`, `x2^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Intercept,
    Covariate(usize),
    Product(usize, usize),
    Power(usize, u32),
}

impl Term {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Term::Intercept => 1.0,
            Term::Covariate(i) => x[i],
            Term::Product(a, b) => x[a] * x[b],
            Term::Power(i, k) => x[i].powi(k as i32),
        }
    }

    pub fn references(&self, idx: usize) -> bool {
        match *self {
            Term::Intercept => false,
            Term::Covariate(i) | Term::Power(i, _) => i == idx,
            Term::Product(a, b) => a == idx || b == idx,
        }
    }

    fn max_index(&self) -> Option<usize> {
        match *self {
            Term::Intercept => None,
            Term::Covariate(i) | Term::Power(i, _) => Some(i),
            Term::Product(a, b) => Some(a.max(b)),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Term::Intercept => write!(f, "1"),
            Term::Covariate(i) => write!(f, "x{}", i + 1),
            Term::Product(a, b) => write!(f, "x{}*x{}", a + 1, b + 1),
            Term::Power(i, k) => write!(f, "x{}^{k}", i + 1),
        }
    }
}

fn parse_var(s: &str) -> std::result::Result<usize, String> {
    let s = s.trim();
    let digits = s
        .strip_prefix('x')
        .or_else(|| s.strip_prefix('X'))
        .ok_or_else(|| format!("expected covariate name like x1, found {s:?}"))?;
    let k: usize = digits.parse().map_err(|_| format!("bad covariate index in {s:?}"))?;
    if k == 0 {
        return Err("covariate names are 1-based".into());
    }
    Ok(k - 1)
}

impl FromStr for Term {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if s == "1" || s.eq_ignore_ascii_case("intercept") {
            return Ok(Term::Intercept);
        }
        if let Some((a, b)) = s.split_once('*') {
            return Ok(Term::Product(parse_var(a)?, parse_var(b)?));
        }
        if let Some((a, k)) = s.split_once('^') {
            let k: u32 = k.trim().parse().map_err(|_| format!("bad exponent in {s:?}"))?;
            return Ok(Term::Power(parse_var(a)?, k));
        }
        Ok(Term::Covariate(parse_var(s)?))
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Term lists for the outcome (`X`), treatment (`V`) and censoring (`W`)
/// designs. The outcome design always starts with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub outcome: Vec<Term>,
    pub treatment: Vec<Term>,
    pub censoring: Vec<Term>,
}

impl DesignSpec {
    pub fn new(outcome: Vec<Term>, treatment: Vec<Term>, censoring: Vec<Term>) -> Self {
        Self {
            outcome: with_leading_intercept(outcome),
            treatment,
            censoring,
        }
    }

    /// Re-establish the leading intercept after deserialization.
    pub fn normalized(self) -> Self {
        Self::new(self.outcome, self.treatment, self.censoring)
    }

    pub fn validate(&self, num_covariates: usize) -> Result<()> {
        let mut bad = Vec::new();
        for (name, terms) in [
            ("outcome", &self.outcome),
            ("treatment", &self.treatment),
            ("censoring", &self.censoring),
        ] {
            for t in terms.iter() {
                if let Some(m) = t.max_index() {
                    if m >= num_covariates {
                        bad.push(violation(&format!(
                            "{name} term {t} references a covariate beyond x{num_covariates}"
                        )));
                    }
                }
            }
        }
        if self.outcome.first() != Some(&Term::Intercept) {
            bad.push(violation("outcome design must start with an intercept"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

fn with_leading_intercept(mut terms: Vec<Term>) -> Vec<Term> {
    terms.retain(|t| *t != Term::Intercept);
    terms.insert(0, Term::Intercept);
    terms
}

/// Evaluate a term list on every record: one row per record, one column per term.
pub fn build_design(ds: &Dataset, terms: &[Term]) -> Result<DMatrix<f64>> {
    let p = ds.num_covariates();
    for t in terms {
        if let Some(m) = t.max_index() {
            if m >= p {
                return Err(Error::Validation(vec![violation(&format!(
                    "term {t} references a covariate beyond x{p}"
                ))]));
            }
        }
    }
    Ok(DMatrix::from_fn(ds.len(), terms.len(), |i, j| {
        terms[j].eval(&ds.records()[i].covariates)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(t: Option<f64>, cz: f64, d: f64) -> Coarsening {
        derive_coarsening(t, cz, d).unwrap()
    }

    #[test]
    fn coarsening_examples() {
        assert_eq!(
            c(Some(5.0), 10.0, 7.0),
            Coarsening { obs_time: 5.0, event_by_obs: true, response_observed: true, survival_indicator: Some(false) }
        );
        assert_eq!(
            c(Some(9.0), 8.0, 7.0),
            Coarsening { obs_time: 7.0, event_by_obs: false, response_observed: true, survival_indicator: Some(true) }
        );
        assert_eq!(
            c(Some(9.0), 5.0, 7.0),
            Coarsening { obs_time: 5.0, event_by_obs: false, response_observed: false, survival_indicator: None }
        );
    }

    #[test]
    fn tie_counts_as_event() {
        let k = c(Some(4.0), 4.0, 7.0);
        assert!(k.event_by_obs);
        assert_eq!(k.survival_indicator, Some(false));
    }

    #[test]
    fn absent_event_time_is_never_an_event() {
        let k = c(None, 3.0, 7.0);
        assert!(!k.event_by_obs);
        assert!(!k.response_observed);
        let k = c(None, 8.0, 7.0);
        assert_eq!(k.survival_indicator, Some(true));
        assert_eq!(k.obs_time, 7.0);
    }

    #[test]
    fn nonpositive_times_name_the_field() {
        let e = derive_coarsening(Some(1.0), 0.0, 7.0).unwrap_err().to_string();
        assert!(e.contains("censor_time"), "{e}");
        let e = derive_coarsening(Some(-1.0), 2.0, 7.0).unwrap_err().to_string();
        assert!(e.contains("event_time"), "{e}");
    }

    #[test]
    fn exhaustive_grid_properties() {
        let grid = [0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 9.0];
        for &t in &grid {
            for &cz in &grid {
                for &d in &grid {
                    let k = c(Some(t), cz, d);
                    assert!(k.obs_time <= d && k.obs_time > 0.0);
                    if let Some(s) = k.survival_indicator {
                        assert_eq!(s, t >= d);
                    }
                    assert_eq!(k.response_observed, k.survival_indicator.is_some());
                    if !k.response_observed {
                        assert_eq!(k.obs_time, cz);
                        assert!(cz < d);
                    }
                    if t < cz.min(d) {
                        assert_eq!(k.survival_indicator, Some(false));
                    }
                    if cz >= d {
                        assert!(k.response_observed);
                    }
                    // same inputs, same outputs
                    assert_eq!(k, c(Some(t), cz, d));
                }
            }
        }
    }

    fn raw(arm: usize, x: Vec<f64>, t: Option<f64>, cz: Option<f64>) -> RawRow {
        RawRow { covariates: x, arm: Some(arm), event_time: t, censor_time: cz, horizon: None }
    }

    #[test]
    fn validate_examples() {
        let rows: Vec<_> = (1..=3).map(|a| raw(a, vec![0.0], Some(1.0), Some(2.0))).collect();
        let ds = validate_dataset(&rows, Some(5.0), Some(3)).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.censor_times_fully_observed());

        let rows = vec![raw(1, vec![0.0], Some(1.0), Some(2.0)), raw(3, vec![0.0], Some(1.0), Some(2.0))];
        let e = validate_dataset(&rows, Some(5.0), Some(3)).unwrap_err().to_string();
        assert!(e.contains("arm 2 empty"), "{e}");

        let rows = vec![raw(1, vec![0.0], Some(1.0), Some(0.0)), raw(2, vec![0.0], Some(1.0), Some(2.0))];
        let e = validate_dataset(&rows, Some(5.0), Some(2)).unwrap_err().to_string();
        assert!(e.contains("row 0") && e.contains("censor_time"), "{e}");
    }

    #[test]
    fn inconsistent_horizon_rejected() {
        let mut rows = vec![raw(1, vec![0.0], Some(1.0), Some(2.0)), raw(2, vec![0.0], Some(1.0), Some(2.0))];
        rows[0].horizon = Some(5.0);
        rows[1].horizon = Some(6.0);
        let e = validate_dataset(&rows, None, Some(2)).unwrap_err().to_string();
        assert!(e.contains("row 1") && e.contains("inconsistent horizon"), "{e}");
    }

    #[test]
    fn design_examples() {
        let rows = vec![raw(1, vec![3.0, 4.0], Some(1.0), Some(2.0)), raw(2, vec![3.0, 4.0], Some(1.0), Some(2.0))];
        let ds = validate_dataset(&rows, Some(5.0), Some(2)).unwrap();
        let terms: Vec<Term> = ["1", "x1", "x1*x2", "x1^2"].iter().map(|s| s.parse().unwrap()).collect();
        let x = build_design(&ds, &terms).unwrap();
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0, 12.0, 9.0]);
        assert!(build_design(&ds, &[Term::Covariate(2)]).is_err());
    }

    #[test]
    fn term_text_roundtrip() {
        for s in ["1", "x1", "x2*x5", "x3^2"] {
            let t: Term = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert!("x0".parse::<Term>().is_err());
        assert!("y1".parse::<Term>().is_err());
    }

    #[test]
    fn outcome_design_gets_intercept() {
        let d = DesignSpec::new(vec![Term::Covariate(0)], vec![], vec![]);
        assert_eq!(d.outcome, vec![Term::Intercept, Term::Covariate(0)]);
        assert!(d.validate(1).is_ok());
        assert!(d.validate(0).is_err());
    }
}

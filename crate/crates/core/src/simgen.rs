//! Simulation designs, the Monte Carlo truth oracle and the replicate driver.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Exp1, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DesignSpec, SubjectRecord, Term};
use crate::error::{Error, Result};
use crate::estimators::{quantity_labels, quantity_values, Method};
use crate::inference::{bootstrap_methods, cipwr_sandwich, normal_quantile, BootstrapOptions};
use crate::linalg::CompensatedSum;
use crate::pipeline::{CensoringSpec, PipelineConfig};
use crate::seeding::{derive_seed, stream, with_threads};
use crate::survival::TimeMode;

/// Event times at or below zero are moved here.
pub const MIN_EVENT_TIME: f64 = 1e-6;
/// Largest tolerated share of failed Monte Carlo replicates.
pub const MAX_REPLICATE_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensoringMode {
    #[default]
    CovariateDependent,
    /// Covariate slopes of the censoring model are ignored.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspec {
    OutcomeDropX2,
    TreatmentDropX2,
    CensoringDropX2,
}

fn default_horizon() -> f64 {
    130.0
}
fn default_scale() -> f64 {
    7.0
}
fn default_weibull_lambda() -> f64 {
    0.01
}
fn default_weibull_shape() -> f64 {
    7.0
}

/// Logistic event times, Weibull-baseline Cox censoring; covariates
/// `x1, x2, x3 ~ N(0, 1)`, `x4 ~ Bernoulli(0.4)`, `x5 ~ U(-2, 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingOne {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Per arm `(alpha_j0, alpha_j1, alpha_j2, alpha_j4)`.
    pub treatment_coefs: Vec<[f64; 4]>,
    /// Per arm `(beta_j0, beta_j1, beta_j2, beta_j3)`.
    pub outcome_coefs: Vec<[f64; 4]>,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Per arm `(gamma_j0, gamma_j1, gamma_j2, gamma_j5)`.
    pub censoring_coefs: Vec<[f64; 4]>,
    #[serde(default = "default_weibull_lambda")]
    pub weibull_lambda: f64,
    #[serde(default = "default_weibull_shape")]
    pub weibull_shape: f64,
    #[serde(default)]
    pub censoring_mode: CensoringMode,
}

/// Two-phase exponential event hazard `b_{j,k} exp(a_k' x)` whose covariate
/// effects change at `phase_change`; exponential censoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingTwo {
    pub horizon: f64,
    /// Per arm `(alpha_j1, alpha_j2)`.
    pub treatment_coefs: Vec<[f64; 2]>,
    pub lambda: f64,
    pub gamma: [f64; 2],
    /// Censoring log-hazard shifts for arms `2..=J`.
    pub theta: Vec<f64>,
    pub phase_change: f64,
    /// Covariate log-hazard coefficients before and after `phase_change`.
    pub phase_coefs: [[f64; 2]; 2],
    /// Per arm baseline hazards before and after `phase_change`.
    pub baseline_hazards: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Parameters {
    One(SettingOne),
    Two(SettingTwo),
}

fn default_truth_n() -> usize {
    1_000_000
}
fn default_level() -> f64 {
    0.95
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

/// A simulation scenario plus the analysis run on every replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub setting: Setting,
    pub n: usize,
    pub nrep: usize,
    pub parameters: Parameters,
    pub misspec: Vec<Misspec>,
    pub seed: u64,
    pub estimators: Vec<Method>,
    /// Overrides the setting's correctly specified designs.
    pub designs: Option<DesignSpec>,
    pub time_mode: TimeMode,
    pub censoring_model: CensoringSpec,
    pub truth_n: usize,
    pub level: f64,
    /// Bootstrap replicates for the non-CIPWR methods; 0 disables their intervals.
    pub bootstrap_replicates: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    setting: Setting,
    n: usize,
    #[serde(default)]
    nrep: usize,
    parameters: serde_json::Value,
    #[serde(default)]
    misspec: Vec<Misspec>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_methods")]
    estimators: Vec<Method>,
    #[serde(default)]
    designs: Option<DesignSpec>,
    #[serde(default)]
    time_mode: TimeMode,
    #[serde(default)]
    censoring_model: CensoringSpec,
    #[serde(default = "default_truth_n")]
    truth_n: usize,
    #[serde(default = "default_level")]
    level: f64,
    #[serde(default)]
    bootstrap_replicates: usize,
}

fn from_value_at<T: serde::de::DeserializeOwned>(value: serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let pointer = json_pointer(prefix, &e.path().to_string());
        Error::config(pointer, e.into_inner().to_string())
    })
}

/// Convert a serde_path_to_error path (`a.b[2].c`) to a JSON pointer.
pub(crate) fn json_pointer(prefix: &str, path: &str) -> String {
    let mut out = prefix.to_string();
    if path == "." {
        return if out.is_empty() { "/".into() } else { out };
    }
    for seg in path.split('.') {
        let mut rest = seg;
        let (head, tail) = rest.split_at(rest.find('[').unwrap_or(rest.len()));
        if !head.is_empty() {
            out.push('/');
            out.push_str(&head.replace('~', "~0").replace('/', "~1"));
        }
        rest = tail;
        while let Some(end) = rest.find(']') {
            out.push('/');
            out.push_str(&rest[1..end]);
            rest = &rest[end + 1..];
        }
    }
    out
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let raw: RawScenario = from_value_at(value, "")?;
        let parameters = match raw.setting {
            Setting::One => Parameters::One(from_value_at(raw.parameters, "/parameters")?),
            Setting::Two => Parameters::Two(from_value_at(raw.parameters, "/parameters")?),
        };
        let cfg = Self {
            setting: raw.setting,
            n: raw.n,
            nrep: raw.nrep,
            parameters,
            misspec: raw.misspec,
            seed: raw.seed,
            estimators: raw.estimators,
            designs: raw.designs.map(DesignSpec::normalized),
            time_mode: raw.time_mode,
            censoring_model: raw.censoring_model,
            truth_n: raw.truth_n,
            level: raw.level,
            bootstrap_replicates: raw.bootstrap_replicates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn with_parameters(parameters: Parameters, n: usize) -> Self {
        let setting = match parameters {
            Parameters::One(_) => Setting::One,
            Parameters::Two(_) => Setting::Two,
        };
        Self {
            setting,
            n,
            nrep: 0,
            parameters,
            misspec: Vec::new(),
            seed: 0,
            estimators: default_methods(),
            designs: None,
            time_mode: TimeMode::default(),
            censoring_model: CensoringSpec::default(),
            truth_n: default_truth_n(),
            level: default_level(),
            bootstrap_replicates: 0,
        }
    }

    pub fn num_arms(&self) -> usize {
        match &self.parameters {
            Parameters::One(p) => p.outcome_coefs.len(),
            Parameters::Two(p) => p.baseline_hazards.len(),
        }
    }

    pub fn horizon(&self) -> f64 {
        match &self.parameters {
            Parameters::One(p) => p.horizon,
            Parameters::Two(p) => p.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |ptr: &str, msg: &str| Err(Error::config(ptr, msg));
        if self.n < 2 {
            return bad("/n", "n must be at least 2");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("/level", "level must lie in (0, 1)");
        }
        match (&self.parameters, self.setting) {
            (Parameters::One(p), Setting::One) => {
                let j = p.outcome_coefs.len();
                if j < 2 {
                    return bad("/parameters/outcome_coefs", "need at least 2 arms");
                }
                if p.treatment_coefs.len() != j {
                    return bad("/parameters/treatment_coefs", "one row per arm required");
                }
                if p.censoring_coefs.len() != j {
                    return bad("/parameters/censoring_coefs", "one row per arm required");
                }
                if !(p.scale > 0.0) {
                    return bad("/parameters/scale", "scale must be positive");
                }
                if !(p.weibull_lambda > 0.0) {
                    return bad("/parameters/weibull_lambda", "must be positive");
                }
                if !(p.weibull_shape > 0.0) {
                    return bad("/parameters/weibull_shape", "must be positive");
                }
                if !(p.horizon > 0.0) {
                    return bad("/parameters/horizon", "horizon must be positive");
                }
            }
            (Parameters::Two(p), Setting::Two) => {
                let j = p.baseline_hazards.len();
                if j < 2 {
                    return bad("/parameters/baseline_hazards", "need at least 2 arms");
                }
                if p.treatment_coefs.len() != j {
                    return bad("/parameters/treatment_coefs", "one row per arm required");
                }
                if p.theta.len() != j - 1 {
                    return bad("/parameters/theta", "one shift per non-reference arm required");
                }
                if !(p.lambda > 0.0) {
                    return bad("/parameters/lambda", "must be positive");
                }
                if !(p.horizon > 0.0) {
                    return bad("/parameters/horizon", "horizon must be positive");
                }
                if !(p.phase_change > 0.0) {
                    return bad("/parameters/phase_change", "must be positive");
                }
                if p.baseline_hazards.iter().flatten().any(|&b| !(b > 0.0)) {
                    return bad("/parameters/baseline_hazards", "hazards must be positive");
                }
            }
            _ => return bad("/setting", "setting does not match the parameters block"),
        }
        if let Some(d) = &self.designs {
            let p = match self.setting {
                Setting::One => 5,
                Setting::Two => 2,
            };
            d.validate(p).map_err(|e| Error::config("/designs", e.to_string()))?;
        }
        Ok(())
    }

    /// Correct designs for the setting (or the override), with `misspec` applied.
    pub fn designs(&self) -> DesignSpec {
        let base = self.designs.clone().unwrap_or_else(|| correct_designs(self.setting));
        apply_misspecification(&base, &self.misspec).0
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            designs: self.designs(),
            time_mode: self.time_mode,
            censoring: self.censoring_model,
            pseudo_normalization: Default::default(),
        }
    }

    /// Weak outcome association, about 30% censored by `d = 130`.
    pub fn setting_one_weak() -> Self {
        Self::with_parameters(
            Parameters::One(SettingOne {
                horizon: 130.0,
                treatment_coefs: TREATMENT_ONE.to_vec(),
                outcome_coefs: WEAK_OUTCOME.to_vec(),
                scale: 7.0,
                censoring_coefs: censoring_rows(WEAK_SHIFT_30, &CENSORING_SLOPES),
                weibull_lambda: 0.01,
                weibull_shape: 7.0,
                censoring_mode: CensoringMode::CovariateDependent,
            }),
            1500,
        )
    }

    /// Strong outcome association, about 30% censored by `d = 130`.
    pub fn setting_one_strong() -> Self {
        let mut cfg = Self::setting_one_weak();
        if let Parameters::One(p) = &mut cfg.parameters {
            p.outcome_coefs = STRONG_OUTCOME.to_vec();
            p.censoring_coefs = censoring_rows(STRONG_SHIFT_30, &CENSORING_SLOPES);
        }
        cfg
    }

    /// Censoring independent of covariates, about 30% censored.
    pub fn setting_one_random_censoring() -> Self {
        let mut cfg = Self::setting_one_weak();
        if let Parameters::One(p) = &mut cfg.parameters {
            p.censoring_mode = CensoringMode::Random;
            p.censoring_coefs = censoring_rows(RANDOM_SHIFT_30, &CENSORING_SLOPES);
        }
        cfg
    }

    /// Strong outcome association with strongly covariate-dependent censoring,
    /// about 40% censored.
    pub fn setting_one_heavy_censoring() -> Self {
        let mut cfg = Self::setting_one_strong();
        if let Parameters::One(p) = &mut cfg.parameters {
            p.censoring_coefs = censoring_rows(HEAVY_SHIFT_40, &HEAVY_CENSORING_SLOPES);
        }
        cfg
    }

    /// Crossing hazards; `scenario` 1 or 2 selects the reference treatment and
    /// censoring parameters.
    pub fn setting_two(scenario: u8) -> Self {
        let (alpha, lambda, gamma, theta, horizon) = if scenario == 2 {
            ([[0.0, 0.0], [0.2, 0.2], [0.3, 0.3]], 0.7, [-0.5, 0.5], vec![0.4, 0.2], 0.3)
        } else {
            ([[0.0, 0.0], [0.2, 0.0], [0.3, 0.0]], 0.8, [1.0, 0.0], vec![0.2, 0.4], 0.5)
        };
        Self::with_parameters(
            Parameters::Two(SettingTwo {
                horizon,
                treatment_coefs: alpha.to_vec(),
                lambda,
                gamma,
                theta,
                phase_change: SETTING_TWO_PHASE_CHANGE,
                phase_coefs: SETTING_TWO_PHASE_COEFS,
                baseline_hazards: SETTING_TWO_HAZARDS[usize::from(scenario == 2)].to_vec(),
            }),
            1500,
        )
    }
}

const TREATMENT_ONE: [[f64; 4]; 3] = [[0.0, 0.0, 0.0, 0.0], [0.2, 0.4, -0.4, 0.3], [0.3, -0.3, 0.5, -0.3]];
const WEAK_OUTCOME: [[f64; 4]; 3] = [[134.44, 3.0, 3.0, 2.0], [129.986, 3.0, -3.0, 2.0], [125.9, -3.0, 3.0, 2.0]];
const STRONG_OUTCOME: [[f64; 4]; 3] = [[134.588, 9.0, 8.0, 6.0], [125.856, -9.0, 8.0, 6.0], [130.023, 8.0, -9.0, 6.0]];
const CENSORING_SLOPES: [[f64; 3]; 3] = [[0.4, 0.4, 0.3], [0.4, 0.4, -0.3], [-0.4, 0.4, 0.3]];
const HEAVY_CENSORING_SLOPES: [[f64; 3]; 3] = [[1.3, 1.3, 0.3], [1.3, -1.3, -0.3], [-1.3, 1.3, 0.3]];
const WEAK_SHIFT_30: f64 = -30.50;
const STRONG_SHIFT_30: f64 = -30.23;
const RANDOM_SHIFT_30: f64 = -30.29;
const HEAVY_SHIFT_40: f64 = -30.535;
const SETTING_TWO_PHASE_CHANGE: f64 = 0.25;
const SETTING_TWO_PHASE_COEFS: [[f64; 2]; 2] = [[0.5, 0.5], [-0.5, -0.5]];
const SETTING_TWO_HAZARDS: [[[f64; 2]; 3]; 2] = [
    [[0.9788, 2.9365], [1.3981, 1.7477], [1.5942, 0.7971]],
    [[1.5840, 4.7521], [1.6026, 2.0033], [1.6493, 0.8247]],
];

fn censoring_rows(intercept: f64, slopes: &[[f64; 3]]) -> Vec<[f64; 4]> {
    slopes.iter().map(|s| [intercept, s[0], s[1], s[2]]).collect()
}

/// Correctly specified designs for each setting.
pub fn correct_designs(setting: Setting) -> DesignSpec {
    let x = Term::Covariate;
    match setting {
        Setting::One => DesignSpec::new(
            vec![x(0), x(1), x(2)],
            vec![Term::Intercept, x(0), x(1), x(3)],
            vec![x(0), x(1), x(4)],
        ),
        Setting::Two => DesignSpec::new(vec![x(0), x(1)], vec![Term::Intercept, x(0), x(1)], vec![x(0), x(1)]),
    }
}

/// Drop every term involving `x2` from the flagged design parts. Returns the
/// new designs and one warning per flag that changed nothing.
pub fn apply_misspecification(spec: &DesignSpec, misspec: &[Misspec]) -> (DesignSpec, Vec<String>) {
    let mut out = spec.clone();
    let mut warnings = Vec::new();
    for m in misspec {
        let (name, terms) = match m {
            Misspec::OutcomeDropX2 => ("outcome", &mut out.outcome),
            Misspec::TreatmentDropX2 => ("treatment", &mut out.treatment),
            Misspec::CensoringDropX2 => ("censoring", &mut out.censoring),
        };
        let before = terms.len();
        terms.retain(|t| !t.references(1));
        if terms.len() == before {
            warnings.push(format!("{name} design has no x2 term; misspecification is a no-op"));
        }
    }
    (out, warnings)
}

fn softmax_draw(rng: &mut impl Rng, scores: &[f64]) -> usize {
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, wk) in w.iter().enumerate() {
        acc += wk;
        if u < acc {
            return k + 1;
        }
    }
    w.len()
}

fn logistic_draw(rng: &mut impl Rng, mean: f64, scale: f64) -> f64 {
    let u: f64 = rng.random::<f64>();
    let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    mean + scale * (u / (1.0 - u)).ln()
}

struct OneDraw {
    x: [f64; 5],
    arm: usize,
    times: Vec<f64>,
    c: f64,
}

fn draw_one(rng: &mut impl Rng, p: &SettingOne) -> OneDraw {
    let bern = Bernoulli::new(0.4).expect("valid probability");
    let unif = Uniform::new(-2.0, 2.0).expect("valid range");
    let x = [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        f64::from(u8::from(bern.sample(rng))),
        unif.sample(rng),
    ];
    let scores: Vec<f64> = p
        .treatment_coefs
        .iter()
        .map(|a| a[0] + a[1] * x[0] + a[2] * x[1] + a[3] * x[3])
        .collect();
    let arm = softmax_draw(rng, &scores);
    let times: Vec<f64> = p
        .outcome_coefs
        .iter()
        .map(|b| logistic_draw(rng, b[0] + b[1] * x[0] + b[2] * x[1] + b[3] * x[2], p.scale))
        .collect();
    let g = &p.censoring_coefs[arm - 1];
    let lp = match p.censoring_mode {
        CensoringMode::CovariateDependent => g[0] + g[1] * x[0] + g[2] * x[1] + g[3] * x[4],
        CensoringMode::Random => g[0],
    };
    let e: f64 = rng.sample(Exp1);
    let c = (e / (p.weibull_lambda * lp.exp())).powf(1.0 / p.weibull_shape);
    OneDraw { x, arm, times, c }
}

struct TwoDraw {
    x: [f64; 2],
    arm: usize,
    times: Vec<f64>,
    c: f64,
}

/// Inverse transform for the two-phase hazard given a unit exponential `e`.
fn two_phase_time(p: &SettingTwo, arm: usize, x: &[f64; 2], e: f64) -> f64 {
    let b = p.baseline_hazards[arm - 1];
    let r1 = b[0] * (p.phase_coefs[0][0] * x[0] + p.phase_coefs[0][1] * x[1]).exp();
    let r2 = b[1] * (p.phase_coefs[1][0] * x[0] + p.phase_coefs[1][1] * x[1]).exp();
    let h1 = r1 * p.phase_change;
    if e <= h1 {
        e / r1
    } else {
        p.phase_change + (e - h1) / r2
    }
}

fn draw_two(rng: &mut impl Rng, p: &SettingTwo) -> TwoDraw {
    let x = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let scores: Vec<f64> = p.treatment_coefs.iter().map(|a| a[0] * x[0] + a[1] * x[1]).collect();
    let arm = softmax_draw(rng, &scores);
    let times: Vec<f64> = (1..=p.baseline_hazards.len())
        .map(|j| {
            let e: f64 = rng.sample(Exp1);
            two_phase_time(p, j, &x, e)
        })
        .collect();
    let shift = if arm >= 2 { p.theta[arm - 2] } else { 0.0 };
    let lp = p.gamma[0] * x[0] + p.gamma[1] * x[1] + shift;
    let e: f64 = rng.sample(Exp1);
    let c = e / (p.lambda * lp.exp());
    TwoDraw { x, arm, times, c }
}

fn record(covariates: Vec<f64>, arm: usize, t: f64, c: f64, horizon: f64) -> Result<SubjectRecord> {
    let t = t.max(MIN_EVENT_TIME);
    let c = c.max(MIN_EVENT_TIME);
    SubjectRecord::new(covariates, arm, (t <= c).then_some(t), Some(c), horizon)
}

pub fn generate_setting1(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    let Parameters::One(p) = &cfg.parameters else {
        return Err(Error::config("/setting", "generate_setting1 needs setting one"));
    };
    let mut rng = stream(seed, 0);
    let recs = (0..cfg.n)
        .map(|_| {
            let d = draw_one(&mut rng, p);
            record(d.x.to_vec(), d.arm, d.times[d.arm - 1], d.c, p.horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(recs, p.horizon, p.outcome_coefs.len())
}

pub fn generate_setting2(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    let Parameters::Two(p) = &cfg.parameters else {
        return Err(Error::config("/setting", "generate_setting2 needs setting two"));
    };
    let mut rng = stream(seed, 0);
    let recs = (0..cfg.n)
        .map(|_| {
            let d = draw_two(&mut rng, p);
            record(d.x.to_vec(), d.arm, d.times[d.arm - 1], d.c, p.horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(recs, p.horizon, p.baseline_hazards.len())
}

pub fn generate(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    match cfg.setting {
        Setting::One => generate_setting1(cfg, seed),
        Setting::Two => generate_setting2(cfg, seed),
    }
}

/// Oracle truths `mu_j = P(T^(j) >= d)` with their Monte Carlo SEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub survival: Vec<f64>,
    pub se: Vec<f64>,
    pub draws: usize,
}

impl Truth {
    pub fn risk(&self) -> Vec<f64> {
        self.survival.iter().map(|m| 1.0 - m).collect()
    }
}

const ORACLE_CHUNK: usize = 1 << 16;

/// Simulate `draws` covariate vectors and every arm's potential event time;
/// no treatment selection, no censoring.
pub fn truth_oracle(cfg: &ScenarioConfig, draws: usize, seed: u64) -> Result<Truth> {
    if draws < 2 {
        return Err(Error::config("/truth_n", "the oracle needs at least 2 draws"));
    }
    let j = cfg.num_arms();
    let d = cfg.horizon();
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    let counts: Vec<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, c as u64);
            let size = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
            let mut k = vec![0u64; j];
            for _ in 0..size {
                let times = match &cfg.parameters {
                    Parameters::One(p) => draw_one(&mut rng, p).times,
                    Parameters::Two(p) => draw_two(&mut rng, p).times,
                };
                for (a, t) in times.iter().enumerate() {
                    if t.max(MIN_EVENT_TIME) >= d {
                        k[a] += 1;
                    }
                }
            }
            k
        })
        .collect();
    let nf = draws as f64;
    let survival: Vec<f64> = (0..j)
        .map(|a| counts.iter().map(|k| k[a]).sum::<u64>() as f64 / nf)
        .collect();
    let se = survival.iter().map(|m| (m * (1.0 - m) / nf).sqrt()).collect();
    Ok(Truth { survival, se, draws })
}

/// Share of subjects whose response is censored (`R = 0`).
pub fn censored_share(ds: &Dataset) -> f64 {
    ds.records().iter().filter(|r| !r.response_observed).count() as f64 / ds.len() as f64
}

/// Shift every arm's censoring intercept (setting one) or `log lambda`
/// (setting two) by `delta`.
pub fn shift_censoring(cfg: &ScenarioConfig, delta: f64) -> ScenarioConfig {
    let mut out = cfg.clone();
    match &mut out.parameters {
        Parameters::One(p) => p.censoring_coefs.iter_mut().for_each(|g| g[0] += delta),
        Parameters::Two(p) => p.lambda *= delta.exp(),
    }
    out
}

/// Bisection on a common censoring-intercept shift until the censored share on
/// a fixed `n`-subject sample equals `target`. Returns the shifted config and
/// the shift.
pub fn calibrate_censoring(cfg: &ScenarioConfig, target: f64, n: usize, seed: u64) -> Result<(ScenarioConfig, f64)> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::config("/target", "target share must lie in (0, 1)"));
    }
    let mut probe = cfg.clone();
    probe.n = n;
    let share = |delta: f64| generate(&shift_censoring(&probe, delta), seed).map(|ds| censored_share(&ds));
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if share(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let delta = 0.5 * (lo + hi);
    Ok((shift_censoring(cfg, delta), delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub quantity: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub esd: f64,
    pub rmse: f64,
    /// Share of intervals covering the truth; `None` without intervals.
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
    /// Every interval had zero width.
    pub zero_se: bool,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    /// First few failure messages per method.
    pub failure_log: BTreeMap<String, Vec<String>>,
}

impl MetricsTable {
    pub fn row(&self, method: Method, quantity: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.quantity == quantity)
    }

    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

/// One method's output on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimate {
    pub values: Vec<f64>,
    pub se: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub results: Vec<(Method, std::result::Result<ReplicateEstimate, String>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MonteCarloOptions {
    pub threads: Option<usize>,
}

fn analyse_replicate(cfg: &ScenarioConfig, pipeline: &PipelineConfig, r: usize) -> ReplicateOutcome {
    let seed = derive_seed(cfg.seed, r as u64);
    let ds = match generate(cfg, seed) {
        Ok(ds) => ds,
        Err(e) => {
            let msg = format!("replicate {r}: {e}");
            return ReplicateOutcome {
                index: r,
                results: cfg.estimators.iter().map(|&m| (m, Err(msg.clone()))).collect(),
            };
        }
    };
    let needs_prop = cfg.estimators.iter().any(Method::needs_propensity);
    let needs_cens = cfg.estimators.iter().any(Method::needs_censoring_model);
    let nuisance = if needs_prop { Some(pipeline.fit_nuisance(&ds, needs_cens)) } else { None };
    let boot = if cfg.bootstrap_replicates >= 2 {
        let others: Vec<Method> = cfg.estimators.iter().copied().filter(|m| *m != Method::Cipwr).collect();
        let opts = BootstrapOptions {
            replicates: cfg.bootstrap_replicates,
            seed: derive_seed(seed, 1),
            level: cfg.level,
            threads: Some(1),
            ..Default::default()
        };
        bootstrap_methods(&ds, pipeline, &others, &opts)
    } else {
        Vec::new()
    };

    let results = cfg
        .estimators
        .iter()
        .map(|&m| {
            let nu = match &nuisance {
                Some(Ok(nu)) => Some(nu),
                Some(Err(e)) if m.needs_propensity() => return (m, Err(format!("replicate {r}: {e}"))),
                _ => None,
            };
            let est = match pipeline.estimate_with(&ds, m, nu) {
                Ok(e) => e,
                Err(e) => return (m, Err(format!("replicate {r}: {e}"))),
            };
            let values = quantity_values(&est.arm_survival);
            let se = if m == Method::Cipwr {
                let x = crate::data::build_design(&ds, &pipeline.designs.outcome);
                match (x, nu, &est.outcome_fits) {
                    (Ok(x), Some(nu), Some(fits)) => match cipwr_sandwich(&ds, nu, &x, fits) {
                        Ok(sw) => Some(sw.quantity_se()),
                        Err(e) => return (m, Err(format!("replicate {r}: {e}"))),
                    },
                    _ => None,
                }
            } else {
                boot.iter()
                    .find(|(bm, _)| *bm == m)
                    .and_then(|(_, res)| res.as_ref().ok())
                    .map(|b| b.se.clone())
            };
            (m, Ok(ReplicateEstimate { values, se }))
        })
        .collect();
    ReplicateOutcome { index: r, results }
}

/// Generate and analyse `cfg.nrep` replicates, returned in index order.
pub fn simulate_replicates(cfg: &ScenarioConfig, opts: &MonteCarloOptions) -> Vec<ReplicateOutcome> {
    let pipeline = cfg.pipeline();
    with_threads(opts.threads, || {
        (0..cfg.nrep)
            .into_par_iter()
            .map(|r| analyse_replicate(cfg, &pipeline, r))
            .collect()
    })
}

/// Aggregate replicate outputs against `truth` (arm survivals).
pub fn summarize_replicates(
    cfg: &ScenarioConfig,
    outcomes: &[ReplicateOutcome],
    truth: &[f64],
) -> Result<MetricsTable> {
    let labels = quantity_labels(truth.len());
    let truths = quantity_values(truth);
    let z = normal_quantile(0.5 + cfg.level / 2.0);
    let mut rows = Vec::new();
    let mut failure_log = BTreeMap::new();
    for (k, &m) in cfg.estimators.iter().enumerate() {
        let ok: Vec<&ReplicateEstimate> = outcomes.iter().filter_map(|o| o.results[k].1.as_ref().ok()).collect();
        let failed: Vec<String> = outcomes
            .iter()
            .filter_map(|o| o.results[k].1.as_ref().err().cloned())
            .collect();
        let total = outcomes.len();
        if failed.len() as f64 > MAX_REPLICATE_FAILURE_SHARE * total as f64 || ok.len() < 2 {
            return Err(Error::MonteCarloDegenerate {
                method: m.to_string(),
                failed: failed.len(),
                total,
            });
        }
        if !failed.is_empty() {
            failure_log.insert(m.to_string(), failed.iter().take(10).cloned().collect());
        }
        let r = ok.len() as f64;
        for (q, label) in labels.iter().enumerate() {
            let mut sum = CompensatedSum::default();
            for e in &ok {
                sum.add(e.values[q]);
            }
            let mean = sum.value() / r;
            let mut ss = CompensatedSum::default();
            for e in &ok {
                let d = e.values[q] - mean;
                ss.add(d * d);
            }
            // divisor nrep keeps RMSE^2 = bias^2 + ESD^2 exact
            let esd = (ss.value() / r).sqrt();
            let bias = mean - truths[q];
            let rmse = (bias * bias + esd * esd).sqrt();
            let with_se: Vec<(f64, f64)> = ok
                .iter()
                .filter_map(|e| e.se.as_ref().map(|s| (e.values[q], s[q])))
                .collect();
            let (coverage, mean_se, zero_se) = if with_se.is_empty() {
                (None, None, false)
            } else {
                let hits = with_se
                    .iter()
                    .filter(|(v, s)| (v - z * s..=v + z * s).contains(&truths[q]))
                    .count();
                let ms = with_se.iter().map(|(_, s)| s).sum::<f64>() / with_se.len() as f64;
                let zero = with_se.iter().all(|(_, s)| *s == 0.0);
                (Some(hits as f64 / with_se.len() as f64), Some(ms), zero)
            };
            rows.push(MetricsRow {
                method: m,
                quantity: label.clone(),
                truth: truths[q],
                mean_estimate: mean,
                bias,
                esd,
                rmse,
                coverage,
                mean_se,
                zero_se,
                replicates: ok.len(),
                failures: failed.len(),
            });
        }
    }
    Ok(MetricsTable { rows, failure_log })
}

/// Full Monte Carlo study: oracle truths, replicates, metrics.
pub fn run_monte_carlo(cfg: &ScenarioConfig, opts: &MonteCarloOptions) -> Result<(MetricsTable, Truth)> {
    if cfg.nrep < 2 {
        return Err(Error::config("/nrep", "nrep must be at least 2"));
    }
    let truth = with_threads(opts.threads, || truth_oracle(cfg, cfg.truth_n, derive_seed(cfg.seed, u64::MAX)))?;
    let outcomes = simulate_replicates(cfg, opts);
    let table = summarize_replicates(cfg, &outcomes, &truth.survival)?;
    Ok((table, truth))
}

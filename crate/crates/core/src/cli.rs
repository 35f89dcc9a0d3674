//! Command implementations behind the `cipwr` binary: CSV analysis,
//! simulation studies and truth-oracle queries.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{validate_dataset, Dataset, DesignSpec, RawRow, SubjectRecord, Term};
use crate::error::{Error, Result, RowViolation};
use crate::estimators::{quantity_labels, quantity_values, EstimateResult, Method};
use crate::inference::{bootstrap_methods, cipwr_sandwich, wald_ci, BootstrapOptions, CiStyle};
use crate::pipeline::{fit_propensity, CensoringSpec, PipelineConfig};
use crate::seeding::with_threads;
use crate::simgen::{censored_share, run_monte_carlo, truth_oracle, MetricsTable, MonteCarloOptions, ScenarioConfig};
use crate::survival::TimeMode;

/// CSV column names for the analysis input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub arm: String,
    pub event_time: String,
    pub censor_time: String,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Sandwich intervals for CIPWR, bootstrap for the rest.
    #[default]
    Sandwich,
    Bootstrap,
}

fn default_level() -> f64 {
    0.95
}
fn default_replicates() -> usize {
    200
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiSettings {
    #[serde(default)]
    pub method: CiMethod,
    #[serde(default)]
    pub style: CiStyle,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_replicates")]
    pub bootstrap_replicates: usize,
}

impl Default for CiSettings {
    fn default() -> Self {
        Self {
            method: CiMethod::default(),
            style: CiStyle::default(),
            level: default_level(),
            bootstrap_replicates: default_replicates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Relative paths resolve against the config file's directory.
    pub input: PathBuf,
    pub columns: ColumnMap,
    pub horizon: f64,
    #[serde(default = "default_methods")]
    pub estimators: Vec<Method>,
    /// Defaults to every covariate entering each model linearly.
    #[serde(default)]
    pub designs: Option<DesignSpec>,
    #[serde(default)]
    pub trimming: bool,
    #[serde(default)]
    pub ci: CiSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub time_mode: TimeMode,
    #[serde(default)]
    pub censoring_model: CensoringSpec,
}

impl AnalysisConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let pointer = crate::simgen::json_pointer("", &e.path().to_string());
            Error::config(pointer, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("/horizon", "horizon must be positive and finite"));
        }
        if self.estimators.is_empty() {
            return Err(Error::config("/estimators", "at least one estimator is required"));
        }
        if !(self.ci.level > 0.0 && self.ci.level < 1.0) {
            return Err(Error::config("/ci/level", "level must lie in (0, 1)"));
        }
        if self.ci.method == CiMethod::Bootstrap && self.ci.bootstrap_replicates < 2 {
            return Err(Error::config("/ci/bootstrap_replicates", "bootstrap needs at least 2 replicates"));
        }
        if let Some(d) = &self.designs {
            d.validate(self.columns.covariates.len())
                .map_err(|e| Error::config("/designs", e.to_string()))?;
        }
        Ok(())
    }

    pub fn designs(&self) -> DesignSpec {
        self.designs.clone().map(DesignSpec::normalized).unwrap_or_else(|| {
            let linear: Vec<Term> = (0..self.columns.covariates.len()).map(Term::Covariate).collect();
            DesignSpec::new(linear.clone(), linear.clone(), linear)
        })
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            designs: self.designs(),
            time_mode: self.time_mode,
            censoring: self.censoring_model,
            pseudo_normalization: Default::default(),
        }
    }
}

fn parse_cell<T: std::str::FromStr>(field: &str, row: usize, column: &str, bad: &mut Vec<RowViolation>) -> Option<T> {
    let s = field.trim();
    if s.is_empty() {
        return None;
    }
    match s.parse() {
        Ok(v) => Some(v),
        Err(_) => {
            bad.push(RowViolation {
                row: Some(row),
                message: format!("column '{column}': cannot parse '{s}'"),
            });
            None
        }
    }
}

/// Read a subject CSV through `columns`. Empty `event_time` means no event
/// observed; empty `censor_time` means the censoring time was not recorded.
pub fn read_csv(path: &Path, columns: &ColumnMap, horizon: f64) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str, pointer: String| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(pointer, format!("column '{name}' not found in {}", path.display())))
    };
    let arm_col = find(&columns.arm, "/columns/arm".into())?;
    let event_col = find(&columns.event_time, "/columns/event_time".into())?;
    let censor_col = find(&columns.censor_time, "/columns/censor_time".into())?;
    let cov_cols = columns
        .covariates
        .iter()
        .enumerate()
        .map(|(k, c)| find(c, format!("/columns/covariates/{k}")))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let arm = parse_cell::<usize>(cell(arm_col), i, &columns.arm, &mut bad);
        let event_time = parse_cell::<f64>(cell(event_col), i, &columns.event_time, &mut bad);
        let censor_time = parse_cell::<f64>(cell(censor_col), i, &columns.censor_time, &mut bad);
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (&c, name) in cov_cols.iter().zip(&columns.covariates) {
            match parse_cell::<f64>(cell(c), i, name, &mut bad) {
                Some(v) => covariates.push(v),
                None => {
                    if cell(c).trim().is_empty() {
                        bad.push(RowViolation {
                            row: Some(i),
                            message: format!("column '{name}': missing value"),
                        });
                    }
                    covariates.push(f64::NAN);
                }
            }
        }
        if let Some(a) = arm {
            if a == 0 {
                bad.push(RowViolation {
                    row: Some(i),
                    message: format!("column '{}': arms are numbered from 1", columns.arm),
                });
            }
        }
        rows.push(RawRow {
            covariates,
            arm,
            event_time,
            censor_time,
            horizon: None,
        });
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    validate_dataset(&rows, Some(horizon), None)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write a dataset with columns `arm, event_time, censor_time, x1..xp`.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["arm".to_string(), "event_time".into(), "censor_time".into()];
    header.extend((1..=ds.num_covariates()).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for r in ds.records() {
        let mut row = vec![r.arm.to_string(), fmt_opt(r.event_time), fmt_opt(r.censor_time)];
        row.extend(r.covariates.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Column map matching [`write_csv`] output.
pub fn default_columns(num_covariates: usize) -> ColumnMap {
    ColumnMap {
        arm: "arm".into(),
        event_time: "event_time".into(),
        censor_time: "censor_time".into(),
        covariates: (1..=num_covariates).map(|k| format!("x{k}")).collect(),
    }
}

/// Keep subjects whose propensity for every arm lies inside the common
/// support `[max_g min_{i in g} pi_ij, min_g max_{i in g} pi_ij]`. One pass;
/// the propensity is not refitted between steps.
pub fn trim_lopez_gutman(ds: &Dataset, propensity: &DMatrix<f64>) -> Result<(Dataset, usize)> {
    let j = ds.num_arms();
    if propensity.nrows() != ds.len() || propensity.ncols() != j {
        return Err(Error::Dimension(format!(
            "propensity is {}x{}, expected {}x{j}",
            propensity.nrows(),
            propensity.ncols(),
            ds.len()
        )));
    }
    let mut low = vec![f64::NEG_INFINITY; j];
    let mut high = vec![f64::INFINITY; j];
    for g in 1..=j {
        let members = ds.arm_indices(g);
        if members.is_empty() {
            continue;
        }
        for a in 0..j {
            let vals = members.iter().map(|&i| propensity[(i, a)]);
            let mn = vals.clone().fold(f64::INFINITY, f64::min);
            let mx = vals.fold(f64::NEG_INFINITY, f64::max);
            low[a] = low[a].max(mn);
            high[a] = high[a].min(mx);
        }
    }
    let kept: Vec<usize> = (0..ds.len())
        .filter(|&i| (0..j).all(|a| low[a] <= propensity[(i, a)] && propensity[(i, a)] <= high[a]))
        .collect();
    let counts = kept.iter().fold(vec![0usize; j], |mut c, &i| {
        c[ds.records()[i].arm - 1] += 1;
        c
    });
    if let Some(a) = counts.iter().position(|&c| c == 0) {
        return Err(Error::TrimDegenerate { arm: a + 1 });
    }
    let removed = ds.len() - kept.len();
    Ok((ds.subset(&kept)?, removed))
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: Method,
    pub quantity: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub rows: Vec<ResultRow>,
    /// `(scope, metric, value)` triples.
    pub diagnostics: Vec<(String, String, f64)>,
    pub trimmed: usize,
    /// Per-method failures, in estimator order.
    pub failures: Vec<MethodFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodFailure {
    pub method: Method,
    pub message: String,
    pub exit_code: i32,
}

impl MethodFailure {
    fn new(method: Method, err: &Error) -> Self {
        Self {
            method,
            message: err.to_string(),
            exit_code: exit_code(err),
        }
    }
}

fn method_rows(
    m: &Method,
    labels: &[String],
    est: &EstimateResult,
    se: Option<&[f64]>,
    ci: Option<(&[f64], &[f64])>,
    flags: &str,
) -> Vec<ResultRow> {
    let values = quantity_values(&est.arm_survival);
    labels
        .iter()
        .enumerate()
        .map(|(q, label)| ResultRow {
            method: *m,
            quantity: label.clone(),
            estimate: Some(values[q]),
            se: se.map(|s| s[q]),
            ci_low: ci.map(|c| c.0[q]),
            ci_high: ci.map(|c| c.1[q]),
            flags: flags.to_string(),
        })
        .collect()
}

fn clean_flag(msg: &str) -> String {
    msg.replace([',', '\n'], ";")
}

/// Run every configured estimator on `ds`, with intervals.
pub fn analyze_dataset(ds: &Dataset, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    let pipeline = cfg.pipeline();
    let (ds, trimmed) = if cfg.trimming {
        let (pi, _) = fit_propensity(ds, &pipeline.designs)?;
        trim_lopez_gutman(ds, &pi)?
    } else {
        (ds.clone(), 0)
    };
    let labels = quantity_labels(ds.num_arms());
    let point = pipeline.estimate_all(&ds, &cfg.estimators);

    let boot_methods: Vec<Method> = cfg
        .estimators
        .iter()
        .copied()
        .filter(|m| cfg.ci.method == CiMethod::Bootstrap || *m != Method::Cipwr)
        .collect();
    let boot = if !boot_methods.is_empty() && cfg.ci.bootstrap_replicates >= 2 {
        let opts = BootstrapOptions {
            replicates: cfg.ci.bootstrap_replicates,
            seed: cfg.seed,
            level: cfg.ci.level,
            ci: cfg.ci.style,
            threads: None,
        };
        bootstrap_methods(&ds, &pipeline, &boot_methods, &opts)
    } else {
        Vec::new()
    };

    let mut rows = Vec::new();
    let mut diagnostics = vec![
        ("data".to_string(), "n".to_string(), ds.len() as f64),
        ("data".into(), "trimmed".into(), trimmed as f64),
        ("data".into(), "censored_share".into(), censored_share(&ds)),
    ];
    for arm in 1..=ds.num_arms() {
        let idx = ds.arm_indices(arm);
        let cens = idx.iter().filter(|&&i| !ds.records()[i].response_observed).count();
        diagnostics.push((format!("arm_{arm}"), "n".into(), idx.len() as f64));
        diagnostics.push((
            format!("arm_{arm}"),
            "censored_share".into(),
            if idx.is_empty() { f64::NAN } else { cens as f64 / idx.len() as f64 },
        ));
    }
    let mut failures = Vec::new();
    let nuisance = if cfg.estimators.contains(&Method::Cipwr) && cfg.ci.method == CiMethod::Sandwich {
        Some(pipeline.fit_nuisance(&ds, true))
    } else {
        None
    };

    for (m, res) in point {
        let est = match res {
            Ok(e) => e,
            Err(e) => {
                rows.extend(labels.iter().map(|l| ResultRow {
                    method: m,
                    quantity: l.clone(),
                    estimate: None,
                    se: None,
                    ci_low: None,
                    ci_high: None,
                    flags: format!("failed: {}", clean_flag(&e.to_string())),
                }));
                failures.push(MethodFailure::new(m, &e));
                continue;
            }
        };
        let d = &est.diagnostics;
        let scope = m.as_str().to_string();
        diagnostics.push((scope.clone(), "min_weight".into(), d.min_weight));
        diagnostics.push((scope.clone(), "max_weight".into(), d.max_weight));
        diagnostics.push((scope.clone(), "clipped".into(), d.clipped as f64));
        for (a, ess) in d.effective_sample_size.iter().enumerate() {
            diagnostics.push((scope.clone(), format!("ess_arm_{}", a + 1), *ess));
        }
        let mut flags = Vec::new();
        if d.out_of_range {
            flags.push("out_of_range".to_string());
        }
        if d.clipped > 0 {
            flags.push(format!("clipped={}", d.clipped));
        }

        let sandwich = m == Method::Cipwr && cfg.ci.method == CiMethod::Sandwich;
        if sandwich {
            let sw = match (&nuisance, &est.outcome_fits) {
                (Some(Ok(nu)), Some(fits)) => crate::data::build_design(&ds, &pipeline.designs.outcome)
                    .and_then(|x| cipwr_sandwich(&ds, nu, &x, fits)),
                (Some(Err(e)), _) => Err(Error::Dimension(e.to_string())),
                _ => Err(Error::Dimension("missing outcome fits".into())),
            };
            match sw {
                Ok(sw) => {
                    let se = sw.quantity_se();
                    let values = quantity_values(&est.arm_survival);
                    let (lo, hi): (Vec<f64>, Vec<f64>) =
                        values.iter().zip(&se).map(|(v, s)| wald_ci(*v, *s, cfg.ci.level)).unzip();
                    rows.extend(method_rows(&m, &labels, &est, Some(&se), Some((&lo, &hi)), &flags.join(";")));
                }
                Err(e) => {
                    flags.push(format!("se_failed: {}", clean_flag(&e.to_string())));
                    rows.extend(method_rows(&m, &labels, &est, None, None, &flags.join(";")));
                    failures.push(MethodFailure::new(m, &e));
                }
            }
            continue;
        }
        match boot.iter().find(|(bm, _)| *bm == m).map(|(_, r)| r) {
            Some(Ok(b)) => {
                if !b.failures.is_empty() {
                    flags.push(format!("bootstrap_failures={}", b.failures.len()));
                }
                rows.extend(method_rows(
                    &m,
                    &labels,
                    &est,
                    Some(&b.se),
                    Some((&b.ci_low, &b.ci_high)),
                    &flags.join(";"),
                ));
            }
            Some(Err(e)) => {
                flags.push(format!("se_failed: {}", clean_flag(&e.to_string())));
                rows.extend(method_rows(&m, &labels, &est, None, None, &flags.join(";")));
                failures.push(MethodFailure::new(m, e));
            }
            None => rows.extend(method_rows(&m, &labels, &est, None, None, &flags.join(";"))),
        }
    }
    Ok(AnalysisReport {
        rows,
        diagnostics,
        trimmed,
        failures,
    })
}

fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "quantity", "estimate", "se", "ci_low", "ci_high", "flags"])?;
    for r in rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.quantity.clone(),
            fmt_opt(r.estimate),
            fmt_opt(r.se),
            fmt_opt(r.ci_low),
            fmt_opt(r.ci_high),
            r.flags.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_diagnostics(diag: &[(String, String, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scope", "metric", "value"])?;
    for (s, m, v) in diag {
        w.write_record([s.as_str(), m.as_str(), &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::config("", format!("cannot read {}: {e}", path.display())))
}

/// `analyze`: writes `results.csv` and `diagnostics.csv` into `opts.out`.
pub fn cmd_analyze(config: &Path, opts: &RunOptions) -> Result<AnalysisReport> {
    let mut cfg = AnalysisConfig::from_json(&read_config(config)?)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let input = if cfg.input.is_relative() {
        config.parent().unwrap_or(Path::new(".")).join(&cfg.input)
    } else {
        cfg.input.clone()
    };
    let ds = read_csv(&input, &cfg.columns, cfg.horizon)?;
    cfg.designs()
        .validate(ds.num_covariates())
        .map_err(|e| Error::config("/designs", e.to_string()))?;
    let report = with_threads(opts.threads, || analyze_dataset(&ds, &cfg))?;
    fs::create_dir_all(&opts.out)?;
    write_results(&report.rows, &opts.out.join("results.csv"))?;
    write_diagnostics(&report.diagnostics, &opts.out.join("diagnostics.csv"))?;
    Ok(report)
}

fn write_metrics(table: &MetricsTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "quantity",
        "truth",
        "mean_estimate",
        "bias",
        "esd",
        "rmse",
        "coverage",
        "mean_se",
        "replicates",
        "failures",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.quantity.clone(),
            r.truth.to_string(),
            r.mean_estimate.to_string(),
            r.bias.to_string(),
            r.esd.to_string(),
            r.rmse.to_string(),
            fmt_opt(r.coverage),
            fmt_opt(r.mean_se),
            r.replicates.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub version: String,
    pub wall_time_seconds: f64,
    pub truth_survival: Vec<f64>,
    pub truth_se: Vec<f64>,
    pub failures: std::collections::BTreeMap<String, usize>,
    pub failure_log: std::collections::BTreeMap<String, Vec<String>>,
}

/// `simulate`: writes `metrics.csv` and `manifest.json` into `opts.out`.
pub fn cmd_simulate(config: &Path, opts: &RunOptions) -> Result<(MetricsTable, Manifest)> {
    let mut cfg = ScenarioConfig::from_json(&read_config(config)?)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let start = Instant::now();
    let (table, truth) = run_monte_carlo(&cfg, &MonteCarloOptions { threads: opts.threads })?;
    let failures = cfg
        .estimators
        .iter()
        .map(|m| {
            let f = table.rows_for(*m).next().map_or(0, |r| r.failures);
            (m.to_string(), f)
        })
        .collect();
    let manifest = Manifest {
        seed: cfg.seed,
        config: cfg,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        truth_survival: truth.survival,
        truth_se: truth.se,
        failures,
        failure_log: table.failure_log.clone(),
    };
    fs::create_dir_all(&opts.out)?;
    write_metrics(&table, &opts.out.join("metrics.csv"))?;
    fs::write(opts.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok((table, manifest))
}

/// `truth`: prints and writes `truth.csv` with `mu_j`, `1 - mu_j` and the oracle SE.
pub fn cmd_truth(config: &Path, draws: Option<usize>, opts: &RunOptions) -> Result<crate::simgen::Truth> {
    let mut cfg = ScenarioConfig::from_json(&read_config(config)?)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let n = draws.unwrap_or(cfg.truth_n);
    let truth = with_threads(opts.threads, || truth_oracle(&cfg, n, cfg.seed))?;
    fs::create_dir_all(&opts.out)?;
    let mut w = csv::Writer::from_path(opts.out.join("truth.csv"))?;
    w.write_record(["arm", "survival", "risk", "se"])?;
    println!("arm\tsurvival\trisk\tse");
    for (a, (m, s)) in truth.survival.iter().zip(&truth.se).enumerate() {
        println!("{}\t{m:.6}\t{:.6}\t{s:.6}", a + 1, 1.0 - m);
        w.write_record([(a + 1).to_string(), m.to_string(), (1.0 - m).to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(truth)
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Validation(_) | Error::Json(_) | Error::Csv(_) | Error::Io(_) | Error::Mode => 2,
        Error::TrimDegenerate { .. } | Error::BootstrapDegenerate { .. } => 4,
        _ => 3,
    }
}

/// Exit code for a finished analysis: the worst per-method failure.
pub fn report_exit_code(report: &AnalysisReport) -> i32 {
    report.failures.iter().map(|f| f.exit_code).max().unwrap_or(0)
}

/// Build a dataset for tests and fixtures without going through CSV.
pub fn dataset_from_rows(rows: &[(usize, Option<f64>, Option<f64>, Vec<f64>)], horizon: f64) -> Result<Dataset> {
    let num_arms = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let recs = rows
        .iter()
        .map(|(a, t, c, x)| SubjectRecord::new(x.clone(), *a, *t, *c, horizon))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(recs, horizon, num_arms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        dataset_from_rows(
            &[
                (1, Some(1.0), Some(9.0), vec![0.1]),
                (1, None, Some(9.0), vec![0.2]),
                (1, Some(7.0), Some(9.0), vec![0.3]),
                (2, None, Some(9.0), vec![0.4]),
                (2, Some(2.0), Some(9.0), vec![0.5]),
                (2, None, Some(9.0), vec![0.6]),
            ],
            5.0,
        )
        .unwrap()
    }

    #[test]
    fn identical_propensities_remove_nothing() {
        let ds = toy();
        let pi = DMatrix::from_element(6, 2, 0.5);
        let (t, removed) = trim_lopez_gutman(&ds, &pi).unwrap();
        assert_eq!(removed, 0);
        assert_eq!(t.records(), ds.records());
    }

    #[test]
    fn disjoint_supports_are_degenerate() {
        let ds = toy();
        let p1 = [0.6, 0.75, 0.9, 0.1, 0.3, 0.5];
        let pi = DMatrix::from_fn(6, 2, |i, j| if j == 0 { p1[i] } else { 1.0 - p1[i] });
        assert!(matches!(trim_lopez_gutman(&ds, &pi), Err(Error::TrimDegenerate { .. })));
    }

    #[test]
    fn trim_matches_brute_force_rule() {
        let ds = dataset_from_rows(
            &[
                (1, None, Some(9.0), vec![0.0]),
                (1, None, Some(9.0), vec![0.0]),
                (2, None, Some(9.0), vec![0.0]),
                (2, None, Some(9.0), vec![0.0]),
                (2, None, Some(9.0), vec![0.0]),
            ],
            5.0,
        )
        .unwrap();
        let p1 = [0.55, 0.7, 0.3, 0.6, 0.95];
        let pi = DMatrix::from_fn(5, 2, |i, j| if j == 0 { p1[i] } else { 1.0 - p1[i] });
        // arm 1 support: [max(0.55, 0.3), min(0.7, 0.95)] = [0.55, 0.7]
        let expected: Vec<usize> = (0..5).filter(|&i| (0.55..=0.7).contains(&p1[i])).collect();
        let (t, removed) = trim_lopez_gutman(&ds, &pi).unwrap();
        assert_eq!(removed, 5 - expected.len());
        assert_eq!(t.records(), ds.subset(&expected).unwrap().records());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("/x", "bad")), 2);
        assert_eq!(exit_code(&Error::EmptyCell { arm: 1 }), 3);
        assert_eq!(exit_code(&Error::TrimDegenerate { arm: 1 }), 4);
        assert_eq!(
            exit_code(&Error::BootstrapDegenerate {
                failed: 3,
                total: 4,
                failures: vec![]
            }),
            4
        );
    }

    #[test]
    fn analysis_config_pointer_errors() {
        let text = r#"{"input": "a.csv", "columns": {"arm": "z", "event_time": "t", "censor_time": "c", "covariates": ["x"]}, "horizon": "soon"}"#;
        match AnalysisConfig::from_json(text).unwrap_err() {
            Error::Config { pointer, .. } => assert_eq!(pointer, "/horizon"),
            e => panic!("{e}"),
        }
        let text = r#"{"input": "a.csv", "columns": {"arm": "z", "event_time": "t", "censor_time": "c", "covariates": ["x"]}, "horizon": 1.0, "ci": {"method": "bootstrap", "bootstrap_replicates": 1}}"#;
        match AnalysisConfig::from_json(text).unwrap_err() {
            Error::Config { pointer, .. } => assert_eq!(pointer, "/ci/bootstrap_replicates"),
            e => panic!("{e}"),
        }
    }
}

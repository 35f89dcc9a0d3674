//! Nuisance-model fitting and estimator dispatch shared by the CLI, the
//! bootstrap and the Monte Carlo driver.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{build_design, Dataset, DesignSpec};
use crate::error::Result;
use crate::estimators::{
    estimate_caipw_wang, estimate_cipwr_with, estimate_ipw, estimate_naive, estimate_pseudo_ipw, horvitz_thompson,
    EstimateResult, Method, Normalization,
};
use crate::glm::{fit_multinomial, MultinomialFit};
use crate::survival::{censoring_data, fit_censoring_models, uncensored_probabilities, CensoringFit, TimeMode};

/// How the censoring distribution enters the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensoringSpec {
    /// Treatment-specific Cox models with Breslow baselines.
    #[default]
    Cox,
    /// No censoring correction: `Lambda = 0`.
    None,
}

#[derive(Debug, Clone)]
pub enum TreatmentNuisance {
    Fitted { design: DMatrix<f64>, fit: MultinomialFit },
    /// Known propensities; no estimation correction.
    Fixed,
}

#[derive(Debug, Clone)]
pub enum CensoringNuisance {
    Cox {
        design: DMatrix<f64>,
        time: Vec<f64>,
        status: Vec<f64>,
        fits: Vec<CensoringFit>,
    },
    Absent,
}

/// Fitted treatment and censoring models plus the quantities the estimators need.
#[derive(Debug, Clone)]
pub struct Nuisance {
    /// `n x J`, column `j-1` holds `pi_ij`.
    pub propensity: DMatrix<f64>,
    pub treatment: TreatmentNuisance,
    pub censoring: CensoringNuisance,
    /// `exp(-Lambda_{i,Z_i}(L_i))`, unfloored.
    pub uncensored: Vec<f64>,
}

impl Nuisance {
    /// Known propensities and no censoring model.
    pub fn fixed(propensity: DMatrix<f64>, n: usize) -> Self {
        Self {
            propensity,
            treatment: TreatmentNuisance::Fixed,
            censoring: CensoringNuisance::Absent,
            uncensored: vec![1.0; n],
        }
    }

    pub fn with_censoring(mut self, ds: &Dataset, designs: &DesignSpec, mode: TimeMode) -> Result<Self> {
        let (censoring, uncensored) = fit_censoring(ds, designs, mode)?;
        self.censoring = censoring;
        self.uncensored = uncensored;
        Ok(self)
    }
}

pub fn fit_propensity(ds: &Dataset, designs: &DesignSpec) -> Result<(DMatrix<f64>, TreatmentNuisance)> {
    let v = build_design(ds, &designs.treatment)?;
    let arms: Vec<usize> = ds.records().iter().map(|r| r.arm).collect();
    let fit = fit_multinomial(&v, &arms, ds.num_arms())?;
    let pi = fit.predict(&v)?;
    Ok((pi, TreatmentNuisance::Fitted { design: v, fit }))
}

fn fit_censoring(ds: &Dataset, designs: &DesignSpec, mode: TimeMode) -> Result<(CensoringNuisance, Vec<f64>)> {
    let fits = fit_censoring_models(ds, &designs.censoring, mode)?;
    let uncensored = uncensored_probabilities(ds, &fits)?;
    let design = build_design(ds, &designs.censoring)?;
    let (time, status) = censoring_data(ds, mode)?;
    Ok((
        CensoringNuisance::Cox {
            design,
            time,
            status,
            fits,
        },
        uncensored,
    ))
}

/// Everything needed to rerun an analysis on a (resampled) dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub designs: DesignSpec,
    #[serde(default)]
    pub time_mode: TimeMode,
    #[serde(default)]
    pub censoring: CensoringSpec,
    #[serde(default)]
    pub pseudo_normalization: Normalization,
}

impl PipelineConfig {
    pub fn new(designs: DesignSpec) -> Self {
        Self {
            designs,
            time_mode: TimeMode::default(),
            censoring: CensoringSpec::default(),
            pseudo_normalization: Normalization::default(),
        }
    }

    /// Fit the treatment model and, when requested, the censoring model.
    pub fn fit_nuisance(&self, ds: &Dataset, with_censoring: bool) -> Result<Nuisance> {
        let (propensity, treatment) = fit_propensity(ds, &self.designs)?;
        let mut nuisance = Nuisance {
            propensity,
            treatment,
            censoring: CensoringNuisance::Absent,
            uncensored: vec![1.0; ds.len()],
        };
        if with_censoring && self.censoring == CensoringSpec::Cox {
            nuisance = nuisance.with_censoring(ds, &self.designs, self.time_mode)?;
        }
        Ok(nuisance)
    }

    /// Run one estimator on already fitted nuisance models.
    pub fn estimate_with(&self, ds: &Dataset, method: Method, nuisance: Option<&Nuisance>) -> Result<EstimateResult> {
        let Some(nu) = nuisance.filter(|_| method.needs_propensity()) else {
            return match method {
                Method::Naive => estimate_naive(ds),
                _ => self.estimate(ds, method),
            };
        };
        match method {
            Method::Naive => estimate_naive(ds),
            Method::Ipw => estimate_ipw(ds, &nu.propensity),
            Method::Cipw => horvitz_thompson(ds, &nu.propensity, &nu.uncensored, Method::Cipw),
            Method::Cipwr => {
                let x = build_design(ds, &self.designs.outcome)?;
                estimate_cipwr_with(ds, &nu.propensity, &nu.uncensored, &x)
            }
            Method::CaipwWang => estimate_caipw_wang(ds, &nu.propensity, &self.designs.outcome),
            Method::PseudoIpw => estimate_pseudo_ipw(ds, &nu.propensity, self.pseudo_normalization),
        }
    }

    pub fn estimate(&self, ds: &Dataset, method: Method) -> Result<EstimateResult> {
        if !method.needs_propensity() {
            return estimate_naive(ds);
        }
        let nu = self.fit_nuisance(ds, method.needs_censoring_model())?;
        self.estimate_with(ds, method, Some(&nu))
    }

    /// Run several estimators, sharing nuisance fits where they succeed.
    /// A nuisance failure is reported separately for every method that needs it.
    pub fn estimate_all(&self, ds: &Dataset, methods: &[Method]) -> Vec<(Method, Result<EstimateResult>)> {
        let wants_censoring = methods.iter().any(Method::needs_censoring_model);
        let shared = if methods.iter().any(Method::needs_propensity) {
            self.fit_nuisance(ds, wants_censoring).ok()
        } else {
            None
        };
        methods
            .iter()
            .map(|&m| {
                let res = match &shared {
                    Some(nu) => self.estimate_with(ds, m, Some(nu)),
                    None => self.estimate(ds, m),
                };
                (m, res)
            })
            .collect()
    }
}

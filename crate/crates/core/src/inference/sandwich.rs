//! Influence-function variance for the CIPWR estimator.
//!
//! For arm `j`, with `omega_i = D_ij R_i exp(Lambda_ij(L_i)) / pi_ij`,
//! `e_i = Y_i - m_i` and the weighted score
//! `G = n^-1 sum_i omega_i e_i X_i`, the influence of subject `k` is
//!
//! ```text
//! psi_k = m_k - mu + A B^-1 [ omega_k e_k X_k + F H^-1 S_k + P Omega^-1 U_k
//!                             + int Q(u) dM_k(u) / s0(u) ]
//! ```
//!
//! where `A = dmu/dbeta`, `B = -dG/dbeta`, `F = dG/dalpha`, `H` is the
//! multinomial information, `S_k` the multinomial score contribution,
//! `P = dG/dgamma` through both `exp(W'gamma)` and the Breslow baseline,
//! `Omega` the Cox information, `U_k` the Cox score residual and
//! `Q(u) = dG/d(dLambda_0(u))`. All matrices are per-subject averages.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::UNCENSORED_FLOOR;
use crate::glm::{
    multinomial_information, multinomial_score, softmax_probabilities, unflatten, weighted_gram, LogisticFit,
};
use crate::linalg::{expit, solve_spd, solve_spd_mat};
use crate::pipeline::{CensoringNuisance, Nuisance, TreatmentNuisance};
use crate::survival::{cox_information, cox_score};

#[derive(Debug, Clone)]
pub struct InfluenceComponents {
    pub arm: usize,
    /// `n^-1 sum_i m_i (1 - m_i) X_i`
    pub a: DVector<f64>,
    /// `n^-1 sum_i omega_i m_i (1 - m_i) X_i X_i'`
    pub b: DMatrix<f64>,
    /// `p x (J-1)q`, block `l` is `F_jl`.
    pub f: Option<DMatrix<f64>>,
    /// Cox information of arm `j`, divided by `n`.
    pub omega: Option<DMatrix<f64>>,
    /// `n x r` Cox score residuals `int (W_k - wbar) dM_k`; zero outside arm `j`.
    pub u: Option<DMatrix<f64>>,
    /// `n x r` rows `K_ij(L_i)`.
    pub k: Option<DMatrix<f64>>,
    /// `p x r`
    pub p: Option<DMatrix<f64>>,
    /// Distinct censoring-event times of arm `j`.
    pub event_times: Vec<f64>,
    /// `E x p`, row `e` is `Q(u_e)`.
    pub q: Option<DMatrix<f64>>,
    /// `n x p` rows `int Q(u) dM_k(u) / s0(u)`.
    pub martingale_integrals: Option<DMatrix<f64>>,
    /// `|sum_k M_k(inf)|` for the arm's censoring martingales.
    pub martingale_sum: f64,
    /// Influence values, one per subject.
    pub psi: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SandwichResult {
    pub arm_se: Vec<f64>,
    /// Entry `(j, k)` is the SE of `mu_j - mu_k`.
    pub contrast_se: DMatrix<f64>,
    /// `n x J` influence values.
    pub psi: DMatrix<f64>,
    /// Multinomial information over `n`, when the propensity was estimated.
    pub h: Option<DMatrix<f64>>,
    pub components: Vec<InfluenceComponents>,
}

impl SandwichResult {
    /// SEs aligned with [`crate::estimators::quantity_labels`].
    pub fn quantity_se(&self) -> Vec<f64> {
        let j = self.arm_se.len();
        let mut out = self.arm_se.clone();
        for a in 0..j {
            for b in a + 1..j {
                out.push(self.contrast_se[(a, b)]);
            }
        }
        out
    }
}

fn singular(block: impl Into<String>) -> Error {
    Error::SingularBlock { block: block.into() }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `n^-1 sum_i omega_i (Y_i - expit(X_i'beta)) X_i` for `arm`, where
/// `omega_i = D_ij R_i / (pi_i max(exp(-cumhaz_i), floor))`.
pub fn weighted_outcome_score(
    ds: &Dataset,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    pi_arm: &[f64],
    cumhaz: &[f64],
    arm: usize,
) -> DVector<f64> {
    let n = ds.len();
    let mut g = DVector::zeros(x.ncols());
    for (i, r) in ds.records().iter().enumerate() {
        if r.arm != arm || !r.response_observed {
            continue;
        }
        let omega = 1.0 / (pi_arm[i] * (-cumhaz[i]).exp().max(UNCENSORED_FLOOR));
        let e = r.survival_value() - expit(x.row(i).dot(&beta.transpose()));
        g.axpy(omega * e, &x.row(i).transpose(), 1.0);
    }
    g / n as f64
}

/// Per-arm Breslow pieces at a given `gamma`.
struct ArmHazard {
    /// Positions (in the full sample) of the arm's subjects.
    idx: Vec<usize>,
    times: Vec<f64>,
    /// Breslow increments at `times`.
    dlambda: Vec<f64>,
    /// `n^-1 sum Y_k exp(W_k'gamma)` at `times`.
    s0: Vec<f64>,
    /// `E x r` at-risk weighted covariate means.
    wbar: DMatrix<f64>,
    /// `exp(W_i'gamma)` for every subject.
    risk: Vec<f64>,
}

impl ArmHazard {
    fn new(w: &DMatrix<f64>, time: &[f64], status: &[f64], ds: &Dataset, arm: usize, gamma: &DVector<f64>) -> Self {
        let n = ds.len() as f64;
        let r = w.ncols();
        let idx = ds.arm_indices(arm);
        let risk: Vec<f64> = (0..ds.len()).map(|i| w.row(i).dot(&gamma.transpose()).exp()).collect();
        let mut times: Vec<f64> = idx.iter().filter(|&&i| status[i] > 0.0).map(|&i| time[i]).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let e = times.len();
        let mut order = idx.clone();
        order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
        let mut s0 = vec![0.0; e];
        let mut s1 = DMatrix::zeros(e, r);
        let mut dlambda = vec![0.0; e];
        let mut acc0 = 0.0;
        let mut acc1 = DVector::zeros(r);
        let mut pos = 0;
        for k in (0..e).rev() {
            let t = times[k];
            let mut d = 0.0;
            while pos < order.len() && time[order[pos]] >= t {
                let i = order[pos];
                acc0 += risk[i];
                acc1.axpy(risk[i], &w.row(i).transpose(), 1.0);
                pos += 1;
            }
            for &i in &idx {
                if status[i] > 0.0 && time[i] == t {
                    d += 1.0;
                }
            }
            s0[k] = acc0 / n;
            s1.row_mut(k).copy_from(&(acc1.transpose() / n));
            dlambda[k] = d / acc0;
        }
        let mut wbar = s1;
        for k in 0..e {
            let s = s0[k];
            wbar.row_mut(k).scale_mut(1.0 / s);
        }
        Self {
            idx,
            times,
            dlambda,
            s0,
            wbar,
            risk,
        }
    }

    /// Index one past the last event time `<= t`.
    fn upto(&self, t: f64) -> usize {
        self.times.partition_point(|&u| u <= t)
    }
}

/// `Lambda_ij(L_i)` for subjects of `arm` (zero elsewhere) under Breslow at
/// `gamma`, or under explicit baseline `increments` at the arm's event times.
pub fn arm_cumhaz_at_followup(
    ds: &Dataset,
    w: &DMatrix<f64>,
    time: &[f64],
    status: &[f64],
    arm: usize,
    gamma: &DVector<f64>,
    increments: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let hz = ArmHazard::new(w, time, status, ds, arm, gamma);
    let inc = increments.map_or_else(|| hz.dlambda.clone(), <[f64]>::to_vec);
    let mut cum = vec![0.0; inc.len() + 1];
    for k in 0..inc.len() {
        cum[k + 1] = cum[k] + inc[k];
    }
    let mut out = vec![0.0; ds.len()];
    for &i in &hz.idx {
        out[i] = cum[hz.upto(ds.records()[i].obs_time)] * hz.risk[i];
    }
    (out, hz.times)
}

/// Plug-in sandwich standard errors for CIPWR fitted with `nuisance`.
pub fn cipwr_sandwich(
    ds: &Dataset,
    nuisance: &Nuisance,
    outcome_design: &DMatrix<f64>,
    outcome_fits: &[LogisticFit],
) -> Result<SandwichResult> {
    let n = ds.len();
    let nf = n as f64;
    let j_arms = ds.num_arms();
    if outcome_fits.len() != j_arms {
        return Err(Error::Dimension(format!("{} outcome fits for {j_arms} arms", outcome_fits.len())));
    }

    // treatment-model pieces shared across arms
    let treat = match &nuisance.treatment {
        TreatmentNuisance::Fitted { design, fit } => {
            let arms: Vec<usize> = ds.records().iter().map(|r| r.arm).collect();
            let h = multinomial_information(design, &fit.coefficients) / nf;
            let q = design.ncols();
            let s = DMatrix::from_fn(n, (j_arms - 1) * q, |i, c| {
                let l = c / q;
                design[(i, c % q)] * (indicator(arms[i] == l + 1) - nuisance.propensity[(i, l)])
            });
            Some((design, h, s))
        }
        TreatmentNuisance::Fixed => None,
    };

    let mut psi = DMatrix::zeros(n, j_arms);
    let mut components = Vec::with_capacity(j_arms);
    for arm in 1..=j_arms {
        let comp = arm_influence(ds, nuisance, outcome_design, &outcome_fits[arm - 1], arm, treat.as_ref())?;
        psi.column_mut(arm - 1).copy_from(&comp.psi);
        components.push(comp);
    }

    let arm_se = (0..j_arms).map(|j| psi.column(j).norm() / nf).collect();
    let contrast_se =
        DMatrix::from_fn(j_arms, j_arms, |a, b| (psi.column(a) - psi.column(b)).norm() / nf);
    Ok(SandwichResult {
        arm_se,
        contrast_se,
        psi,
        h: treat.map(|t| t.1),
        components,
    })
}

fn arm_influence(
    ds: &Dataset,
    nuisance: &Nuisance,
    x: &DMatrix<f64>,
    fit: &LogisticFit,
    arm: usize,
    treat: Option<&(&DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
) -> Result<InfluenceComponents> {
    let n = ds.len();
    let nf = n as f64;
    let p = x.ncols();
    let j0 = arm - 1;
    let recs = ds.records();
    let m = fit.predict(x)?;
    let mu = m.iter().sum::<f64>() / nf;

    // censoring hazard at L_i and whether its derivative is live
    let hazard = match &nuisance.censoring {
        CensoringNuisance::Cox {
            design,
            time,
            status,
            fits,
        } => {
            let gamma = &fits[j0].coefficients;
            Some((design, time, status, ArmHazard::new(design, time, status, ds, arm, gamma)))
        }
        CensoringNuisance::Absent => None,
    };
    let mut cumhaz = vec![0.0; n];
    if let Some((design, time, status, _)) = &hazard {
        let gamma = match &nuisance.censoring {
            CensoringNuisance::Cox { fits, .. } => &fits[j0].coefficients,
            CensoringNuisance::Absent => unreachable!(),
        };
        cumhaz = arm_cumhaz_at_followup(ds, design, time, status, arm, gamma, None).0;
    }

    let mut omega_w = vec![0.0; n];
    let mut live = vec![false; n];
    let mut resid = vec![0.0; n];
    for (i, r) in recs.iter().enumerate() {
        resid[i] = r.survival_value() - m[i];
        if r.arm == arm && r.response_observed {
            let u = (-cumhaz[i]).exp();
            live[i] = u >= UNCENSORED_FLOOR;
            omega_w[i] = 1.0 / (nuisance.propensity[(i, j0)] * u.max(UNCENSORED_FLOOR));
        }
    }

    let a = (0..n).fold(DVector::zeros(p), |acc: DVector<f64>, i| {
        acc + x.row(i).transpose() * (m[i] * (1.0 - m[i]))
    }) / nf;
    let bw: Vec<f64> = (0..n).map(|i| omega_w[i] * m[i] * (1.0 - m[i])).collect();
    let b = weighted_gram(x, &bw) / nf;

    // phi_k, one row per subject
    let mut phi = DMatrix::from_fn(n, p, |i, c| omega_w[i] * resid[i] * x[(i, c)]);

    let mut f_block = None;
    if let Some((v, h, s)) = treat {
        let q = v.ncols();
        let jm1 = ds.num_arms() - 1;
        let mut f = DMatrix::zeros(p, jm1 * q);
        for i in 0..n {
            if omega_w[i] == 0.0 {
                continue;
            }
            let xi = x.row(i).transpose();
            let vi = v.row(i);
            for l in 0..jm1 {
                let c = -omega_w[i] * resid[i] * (indicator(j0 == l) - nuisance.propensity[(i, l)]) / nf;
                if c != 0.0 {
                    let mut blk = f.view_mut((0, l * q), (p, q));
                    blk.ger(c, &xi, &vi.transpose(), 1.0);
                }
            }
        }
        let hinv_ft = solve_spd_mat(h, &f.transpose()).ok_or_else(|| singular("H"))?;
        phi += s * hinv_ft;
        f_block = Some(f);
    }

    let mut omega_blk = None;
    let mut u_mat = None;
    let mut k_mat = None;
    let mut p_blk = None;
    let mut q_mat = None;
    let mut mi_mat = None;
    let mut event_times = Vec::new();
    let mut martingale_sum = 0.0;
    if let Some((w, time, status, hz)) = &hazard {
        let r = w.ncols();
        let e = hz.times.len();
        // cumulative sums over event times: C1 = int dLambda0, Cw = int wbar dLambda0
        let mut c1 = vec![0.0; e + 1];
        let mut cw = DMatrix::zeros(e + 1, r);
        for t in 0..e {
            c1[t + 1] = c1[t] + hz.dlambda[t];
            let next = cw.row(t) + hz.wbar.row(t) * hz.dlambda[t];
            cw.row_mut(t + 1).copy_from(&next);
        }

        let mut k = DMatrix::zeros(n, r);
        let mut u = DMatrix::zeros(n, r);
        let mut msum = 0.0;
        for &i in &hz.idx {
            let wi = w.row(i);
            let at_l = hz.upto(recs[i].obs_time);
            k.row_mut(i).copy_from(&((wi * c1[at_l] - cw.row(at_l)) * hz.risk[i]));
            let at_t = hz.upto(time[i]);
            let mut ui = -(wi * c1[at_t] - cw.row(at_t)) * hz.risk[i];
            if status[i] > 0.0 {
                ui += wi - hz.wbar.row(at_t - 1);
            }
            u.row_mut(i).copy_from(&ui);
            msum += status[i] - hz.risk[i] * c1[at_t];
        }
        martingale_sum = msum.abs();

        let mut pm = DMatrix::zeros(p, r);
        for &i in &hz.idx {
            if live[i] && omega_w[i] > 0.0 {
                pm.ger(omega_w[i] * resid[i] / nf, &x.row(i).transpose(), &k.row(i).transpose(), 1.0);
            }
        }

        // Q(u_e) = n^-1 sum_i omega_i e_i X_i exp(W_i'gamma) I(L_i >= u_e)
        let mut order: Vec<usize> = hz.idx.iter().copied().filter(|&i| live[i] && omega_w[i] > 0.0).collect();
        order.sort_by(|&a, &b| recs[b].obs_time.total_cmp(&recs[a].obs_time));
        let mut qm = DMatrix::zeros(e, p);
        let mut acc = DVector::zeros(p);
        let mut pos = 0;
        for t in (0..e).rev() {
            while pos < order.len() && recs[order[pos]].obs_time >= hz.times[t] {
                let i = order[pos];
                acc.axpy(omega_w[i] * resid[i] * hz.risk[i] / nf, &x.row(i).transpose(), 1.0);
                pos += 1;
            }
            qm.row_mut(t).copy_from(&acc.transpose());
        }
        let mut cq = DMatrix::zeros(e + 1, p);
        for t in 0..e {
            let next = cq.row(t) + qm.row(t) * (hz.dlambda[t] / hz.s0[t]);
            cq.row_mut(t + 1).copy_from(&next);
        }
        let mut mi = DMatrix::zeros(n, p);
        for &i in &hz.idx {
            let at_t = hz.upto(time[i]);
            let mut row = -cq.row(at_t) * hz.risk[i];
            if status[i] > 0.0 {
                row += qm.row(at_t - 1) / hz.s0[at_t - 1];
            }
            mi.row_mut(i).copy_from(&row);
        }
        phi += &mi;

        if r > 0 {
            let idx = &hz.idx;
            let wa = w.select_rows(idx);
            let ta: Vec<f64> = idx.iter().map(|&i| time[i]).collect();
            let sa: Vec<f64> = idx.iter().map(|&i| status[i]).collect();
            let gamma = match &nuisance.censoring {
                CensoringNuisance::Cox { fits, .. } => &fits[j0].coefficients,
                CensoringNuisance::Absent => unreachable!(),
            };
            let om = cox_information(&wa, &ta, &sa, gamma) / nf;
            let oinv_pt = solve_spd_mat(&om, &pm.transpose()).ok_or_else(|| singular(format!("Omega_{arm}")))?;
            phi += &u * oinv_pt;
            omega_blk = Some(om);
        }
        u_mat = Some(u);
        k_mat = Some(k);
        p_blk = Some(pm);
        q_mat = Some(qm);
        mi_mat = Some(mi);
        event_times = hz.times.clone();
    }

    let v = solve_spd(&b, &a).ok_or_else(|| singular(format!("B_{arm}")))?;
    let lin = &phi * v;
    let psi = DVector::from_fn(n, |i, _| m[i] - mu + lin[i]);

    Ok(InfluenceComponents {
        arm,
        a,
        b,
        f: f_block,
        omega: omega_blk,
        u: u_mat,
        k: k_mat,
        p: p_blk,
        event_times,
        q: q_mat,
        martingale_integrals: mi_mat,
        martingale_sum,
        psi,
    })
}

/// Largest `|analytic - numeric| / max|analytic|` for one derivative block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub block: String,
    pub relative_error: f64,
}

fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let scale = analytic.amax().max(numeric.amax());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).amax() / scale
    }
}

/// Central difference Jacobian of `f` at `theta`, columns indexed by `theta`.
fn jacobian(theta: &DVector<f64>, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let f0 = f(theta);
    let mut jac = DMatrix::zeros(f0.len(), theta.len());
    for c in 0..theta.len() {
        let h = 1e-5 * theta[c].abs().max(1.0);
        let mut up = theta.clone();
        up[c] += h;
        let mut dn = theta.clone();
        dn[c] -= h;
        let col = (f(&up) - f(&dn)) / (2.0 * h);
        jac.column_mut(c).copy_from(&col);
    }
    jac
}

/// Compare every analytic block of [`cipwr_sandwich`] with central finite
/// differences of the estimating function it differentiates.
pub fn finite_difference_check(
    ds: &Dataset,
    nuisance: &Nuisance,
    outcome_design: &DMatrix<f64>,
    outcome_fits: &[LogisticFit],
) -> Result<Vec<BlockCheck>> {
    let sw = cipwr_sandwich(ds, nuisance, outcome_design, outcome_fits)?;
    let x = outcome_design;
    let nf = ds.len() as f64;
    let mut out = Vec::new();
    let mut push = |block: String, a: &DMatrix<f64>, b: &DMatrix<f64>| {
        out.push(BlockCheck {
            block,
            relative_error: rel_err(a, b),
        })
    };

    if let (Some(h), TreatmentNuisance::Fitted { design, fit }) = (&sw.h, &nuisance.treatment) {
        let arms: Vec<usize> = ds.records().iter().map(|r| r.arm).collect();
        let jm1 = fit.coefficients.nrows();
        let q = design.ncols();
        let theta = DVector::from_iterator(jm1 * q, fit.coefficients.transpose().iter().copied());
        let num = jacobian(&theta, |t| multinomial_score(design, &arms, &unflatten(t, jm1, q)) / nf);
        push("H".into(), h, &(-num));
    }

    for comp in &sw.components {
        let arm = comp.arm;
        let j0 = arm - 1;
        let beta = &outcome_fits[j0].coefficients;
        let pi_arm: Vec<f64> = nuisance.propensity.column(j0).iter().copied().collect();
        let (cumhaz, gamma, cox) = match &nuisance.censoring {
            CensoringNuisance::Cox {
                design,
                time,
                status,
                fits,
            } => {
                let g = fits[j0].coefficients.clone();
                let (c, _) = arm_cumhaz_at_followup(ds, design, time, status, arm, &g, None);
                (c, g, Some((design, time, status)))
            }
            CensoringNuisance::Absent => (vec![0.0; ds.len()], DVector::zeros(0), None),
        };

        let num_a = jacobian(beta, |b| {
            let m: f64 = (0..x.nrows()).map(|i| expit(x.row(i).dot(&b.transpose()))).sum();
            DVector::from_element(1, m / nf)
        });
        push(format!("A_{arm}"), &DMatrix::from_row_slice(1, comp.a.len(), comp.a.as_slice()), &num_a);

        let num_b = jacobian(beta, |b| weighted_outcome_score(ds, x, b, &pi_arm, &cumhaz, arm));
        push(format!("B_{arm}"), &comp.b, &(-num_b));

        if let (Some(f), TreatmentNuisance::Fitted { design, fit }) = (&comp.f, &nuisance.treatment) {
            let jm1 = fit.coefficients.nrows();
            let q = design.ncols();
            let theta = DVector::from_iterator(jm1 * q, fit.coefficients.transpose().iter().copied());
            let num = jacobian(&theta, |t| {
                let pr = softmax_probabilities(design, &unflatten(t, jm1, q));
                let col: Vec<f64> = pr.column(j0).iter().copied().collect();
                weighted_outcome_score(ds, x, beta, &col, &cumhaz, arm)
            });
            push(format!("F_{arm}"), f, &num);
        }

        if let Some((w, time, status)) = cox {
            let idx = ds.arm_indices(arm);
            let wa = w.select_rows(&idx);
            let ta: Vec<f64> = idx.iter().map(|&i| time[i]).collect();
            let sa: Vec<f64> = idx.iter().map(|&i| status[i]).collect();
            if let (Some(om), Some(p), Some(k)) = (&comp.omega, &comp.p, &comp.k) {
                let num = jacobian(&gamma, |g| cox_score(&wa, &ta, &sa, g) / nf);
                push(format!("Omega_{arm}"), om, &(-num));

                let num = jacobian(&gamma, |g| {
                    let (c, _) = arm_cumhaz_at_followup(ds, w, time, status, arm, g, None);
                    weighted_outcome_score(ds, x, beta, &pi_arm, &c, arm)
                });
                push(format!("P_{arm}"), p, &num);

                let num = jacobian(&gamma, |g| {
                    let (c, _) = arm_cumhaz_at_followup(ds, w, time, status, arm, g, None);
                    DVector::from_vec(c)
                });
                push(format!("K_{arm}"), k, &num);
            }
            if let Some(q) = &comp.q {
                let (_, times) = arm_cumhaz_at_followup(ds, w, time, status, arm, &gamma, None);
                let hz = ArmHazard::new(w, time, status, ds, arm, &gamma);
                debug_assert_eq!(times, hz.times);
                let inc = DVector::from_vec(hz.dlambda.clone());
                // small relative steps: increments are tiny
                let f0 = |d: &DVector<f64>| {
                    let (c, _) = arm_cumhaz_at_followup(ds, w, time, status, arm, &gamma, Some(d.as_slice()));
                    weighted_outcome_score(ds, x, beta, &pi_arm, &c, arm)
                };
                let mut num = DMatrix::zeros(q.ncols(), inc.len());
                for c in 0..inc.len() {
                    let h = 1e-4 * inc[c].abs().max(1e-8);
                    let mut up = inc.clone();
                    up[c] += h;
                    let mut dn = inc.clone();
                    dn[c] -= h;
                    num.column_mut(c).copy_from(&((f0(&up) - f0(&dn)) / (2.0 * h)));
                }
                push(format!("Q_{arm}"), &q.transpose(), &num);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_design, DesignSpec, SubjectRecord, Term};
    use crate::glm::fit_weighted_logistic;
    use crate::pipeline::PipelineConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Small confounded, covariate-censored three-arm sample.
    fn sample(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = (0..n)
            .map(|_| {
                let x1: f64 = rng.sample(StandardNormal);
                let x2: f64 = rng.sample(StandardNormal);
                let s = [0.3 * x1, -0.2 + 0.4 * x2, 0.0];
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                let u: f64 = rng.random();
                let arm = if u < s[0].exp() / z {
                    1
                } else if u < (s[0].exp() + s[1].exp()) / z {
                    2
                } else {
                    3
                };
                let t = -(rng.random::<f64>()).ln() / (0.5 * (0.5 * x1 - 0.3 * x2 + 0.2 * arm as f64).exp());
                let c = -(rng.random::<f64>()).ln() / (0.4 * (0.4 * x2).exp());
                let ev = if t <= c { Some(t) } else { None };
                SubjectRecord::new(vec![x1, x2], arm, ev, Some(c), 1.2).unwrap()
            })
            .collect();
        Dataset::new(recs, 1.2, 3).unwrap()
    }

    fn designs() -> DesignSpec {
        let (x1, x2) = (Term::Covariate(0), Term::Covariate(1));
        DesignSpec::new(vec![x1, x2], vec![Term::Intercept, x1, x2], vec![x1, x2])
    }

    fn fitted(ds: &Dataset) -> (Nuisance, DMatrix<f64>, Vec<LogisticFit>) {
        let cfg = PipelineConfig::new(designs());
        let nu = cfg.fit_nuisance(ds, true).unwrap();
        let x = build_design(ds, &cfg.designs.outcome).unwrap();
        let est = crate::estimators::estimate_cipwr_with(ds, &nu.propensity, &nu.uncensored, &x).unwrap();
        (nu, x, est.outcome_fits.unwrap())
    }

    #[test]
    fn every_block_matches_finite_differences() {
        let ds = sample(3, 300);
        let (nu, x, fits) = fitted(&ds);
        let checks = finite_difference_check(&ds, &nu, &x, &fits).unwrap();
        assert!(checks.len() >= 1 + 3 * 7, "{checks:?}");
        for c in checks {
            assert!(c.relative_error < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn influence_values_are_centered_and_blocks_psd() {
        let ds = sample(5, 400);
        let (nu, x, fits) = fitted(&ds);
        let sw = cipwr_sandwich(&ds, &nu, &x, &fits).unwrap();
        assert!(crate::linalg::is_psd(sw.h.as_ref().unwrap()));
        for comp in &sw.components {
            let mean = comp.psi.mean();
            let sd = (comp.psi.norm_squared() / ds.len() as f64).sqrt();
            assert!(mean.abs() <= 1e-6 * sd, "arm {}: {mean}", comp.arm);
            assert!(comp.martingale_sum <= 1e-10);
            assert!(crate::linalg::is_psd(&comp.b));
            assert!(crate::linalg::is_psd(comp.omega.as_ref().unwrap()));
            // the baseline-martingale integrals sum to zero
            let mi = comp.martingale_integrals.as_ref().unwrap();
            let col_sums = mi.row_sum();
            assert!(col_sums.amax() <= 1e-10 * (1.0 + mi.amax()), "{col_sums}");
        }
        for a in 0..3 {
            assert_eq!(sw.contrast_se[(a, a)], 0.0);
            for b in 0..3 {
                assert_eq!(sw.contrast_se[(a, b)], sw.contrast_se[(b, a)]);
            }
        }
    }

    /// Stacked M-estimator for unweighted g-computation in one arm with a
    /// numerically differentiated bread.
    fn delta_method_se(ds: &Dataset, x: &DMatrix<f64>, arm: usize) -> f64 {
        let n = ds.len();
        let nf = n as f64;
        let y: Vec<f64> = ds.records().iter().map(|r| r.survival_value()).collect();
        let w: Vec<f64> = ds.records().iter().map(|r| indicator(r.arm == arm)).collect();
        let beta = fit_weighted_logistic(x, &y, &w).unwrap().coefficients;
        let p = x.ncols();
        let mu: f64 = (0..n).map(|i| expit(x.row(i).dot(&beta.transpose()))).sum::<f64>() / nf;
        let theta = beta.clone().insert_row(p, mu);
        let contrib = |t: &DVector<f64>, i: usize| {
            let b = t.rows(0, p).into_owned();
            let m = expit(x.row(i).dot(&b.transpose()));
            let mut v = x.row(i).transpose() * (w[i] * (y[i] - m));
            v = v.insert_row(p, m - t[p]);
            v
        };
        let mean_fn = |t: &DVector<f64>| (0..n).fold(DVector::zeros(p + 1), |acc, i| acc + contrib(t, i)) / nf;
        let bread = jacobian(&theta, mean_fn);
        let meat = (0..n).fold(DMatrix::zeros(p + 1, p + 1), |acc, i| {
            let c = contrib(&theta, i);
            acc + &c * c.transpose()
        }) / nf;
        let binv = bread.try_inverse().unwrap();
        let cov = &binv * meat * binv.transpose() / nf;
        cov[(p, p)].sqrt()
    }

    #[test]
    fn fixed_propensity_without_censoring_is_delta_method() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let recs = (0..200)
            .map(|i| {
                let x: f64 = rng.sample(StandardNormal);
                let arm = 1 + i % 2;
                let t = -(rng.random::<f64>()).ln() * (0.8 * x + 0.3 * arm as f64).exp();
                SubjectRecord::new(vec![x], arm, Some(t), Some(1e9), 1.0).unwrap()
            })
            .collect();
        let ds = Dataset::new(recs, 1.0, 2).unwrap();
        let x = build_design(&ds, &[Term::Intercept, Term::Covariate(0)]).unwrap();
        let nu = Nuisance::fixed(DMatrix::from_element(200, 2, 0.5), 200);
        let est = crate::estimators::estimate_cipwr_with(&ds, &nu.propensity, &nu.uncensored, &x).unwrap();
        let sw = cipwr_sandwich(&ds, &nu, &x, est.outcome_fits.as_ref().unwrap()).unwrap();
        for arm in 1..=2 {
            let want = delta_method_se(&ds, &x, arm);
            assert!((sw.arm_se[arm - 1] - want).abs() < 1e-6, "{} vs {want}", sw.arm_se[arm - 1]);
        }
    }

    #[test]
    fn singular_cox_information_is_reported() {
        let ds = sample(9, 150);
        let (mut nu, x, fits) = fitted(&ds);
        // a censoring design with a duplicated column cannot be inverted
        if let CensoringNuisance::Cox { design, fits: cf, .. } = &mut nu.censoring {
            let c0 = design.column(0).into_owned();
            *design = DMatrix::from_columns(&[c0.clone(), c0]);
            for f in cf.iter_mut() {
                f.coefficients = DVector::zeros(2);
            }
        }
        match cipwr_sandwich(&ds, &nu, &x, &fits).unwrap_err() {
            Error::SingularBlock { block } => assert!(block.starts_with("Omega"), "{block}"),
            e => panic!("{e}"),
        }
    }
}

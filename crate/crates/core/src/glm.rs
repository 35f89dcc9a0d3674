//! Weighted binary logistic and multinomial logistic regression by damped
//! Newton iterations (IRLS) with step-halving.
//!
//! Both solvers start from the zero vector and stop once the max-norm of the
//! score, normalized by the total weight, is at or below `tol`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{collinear_columns, expit, max_abs, solve_spd};

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Coefficient norm beyond which the fit is declared separated.
    pub divergence_bound: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
            divergence_bound: 1e4,
        }
    }
}

/// Fitted probabilities this close to 0 or 1 for a whole class signal separation.
const PROB_EDGE: f64 = 1e-10;
/// A Newton step this large once the score has vanished means the likelihood
/// is flat along a diverging direction rather than at a stationary point.
const FLAT_STEP: f64 = 0.5;
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the weight-normalized score at `coefficients`.
    pub final_gradient_norm: f64,
}

impl LogisticFit {
    pub fn predict(&self, design: &DMatrix<f64>) -> Result<Vec<f64>> {
        predict_logistic(self, design)
    }
}

pub fn predict_logistic(fit: &LogisticFit, design: &DMatrix<f64>) -> Result<Vec<f64>> {
    if design.ncols() != fit.coefficients.len() {
        return Err(Error::Dimension(format!(
            "design has {} columns, coefficients have length {}",
            design.ncols(),
            fit.coefficients.len()
        )));
    }
    Ok((design * &fit.coefficients).iter().map(|&e| expit(e)).collect())
}

/// `sum_i w_i [y_i eta_i - log(1 + exp(eta_i))]`
pub fn logistic_loglik(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y.iter().zip(w))
        .filter(|(_, (_, &wi))| wi > 0.0)
        .map(|(&e, (&yi, &wi))| wi * (yi * e - softplus(e)))
        .sum()
}

/// `sum_i w_i x_i (y_i - expit(x_i' beta))`
pub fn logistic_score(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let r = DVector::from_iterator(x.nrows(), (0..x.nrows()).map(|i| w[i] * (y[i] - expit(eta[i]))));
    x.transpose() * r
}

/// `sum_i w_i m_i (1 - m_i) x_i x_i'`
pub fn logistic_information(x: &DMatrix<f64>, w: &[f64], beta: &DVector<f64>) -> DMatrix<f64> {
    let eta = x * beta;
    let v: Vec<f64> = (0..x.nrows())
        .map(|i| {
            let m = expit(eta[i]);
            w[i] * m * (1.0 - m)
        })
        .collect();
    weighted_gram(x, &v)
}

fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

/// `X' diag(v) X`
pub(crate) fn weighted_gram(x: &DMatrix<f64>, v: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut g = DMatrix::zeros(p, p);
    for i in 0..x.nrows() {
        if v[i] == 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..p {
            let ra = row[a] * v[i];
            for b in a..p {
                g[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

pub fn fit_weighted_logistic(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<LogisticFit> {
    fit_weighted_logistic_with(x, y, w, &SolverOptions::default())
}

pub fn fit_weighted_logistic_with(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    opts: &SolverOptions,
) -> Result<LogisticFit> {
    let n = x.nrows();
    if y.len() != n || w.len() != n {
        return Err(Error::Dimension(format!(
            "design has {n} rows, response {} and weights {}",
            y.len(),
            w.len()
        )));
    }
    if w.iter().any(|&wi| !(wi >= 0.0) || !wi.is_finite()) {
        return Err(Error::Dimension("weights must be finite and nonnegative".into()));
    }

    // zero-weight rows cannot move the fit
    let keep: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    let xs = x.select_rows(&keep);
    let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    let ws: Vec<f64> = keep.iter().map(|&i| w[i]).collect();

    let has_one = ys.iter().any(|&v| v > 0.0);
    let has_zero = ys.iter().any(|&v| v < 1.0);
    if !(has_one && has_zero) {
        return Err(Error::Separation {
            arm: None,
            reason: "every positively weighted response falls in one class".into(),
        });
    }
    let bad = collinear_columns(&xs, RANK_TOL);
    if !bad.is_empty() {
        return Err(Error::Rank { columns: bad });
    }

    let total: f64 = ws.iter().sum();
    let p = x.ncols();
    let objective = |b: &DVector<f64>| logistic_loglik(&xs, &ys, &ws, b) / total;

    let mut beta = DVector::zeros(p);
    let mut ll = objective(&beta);
    for iter in 0..=opts.max_iter {
        let g = logistic_score(&xs, &ys, &ws, &beta) / total;
        let gnorm = max_abs(&g);
        let info = logistic_information(&xs, &ws, &beta) / total;
        let step = solve_spd(&info, &g);

        check_logistic_separation(&xs, &ys, &beta, opts)?;
        if gnorm <= opts.tol {
            if let Some(s) = &step {
                if max_abs(s) > FLAT_STEP {
                    return Err(Error::Separation {
                        arm: None,
                        reason: "likelihood is monotone along a diverging direction".into(),
                    });
                }
            }
            // one last Newton step for full precision
            let coefficients = step.map_or(beta.clone(), |s| &beta + s);
            return Ok(LogisticFit {
                coefficients,
                converged: true,
                iterations: iter,
                final_gradient_norm: gnorm,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::Convergence {
                arm: None,
                iterations: iter,
                gradient_norm: gnorm,
                last_iterate: beta.iter().copied().collect(),
            });
        }
        let Some(step) = step else {
            return Err(Error::Separation {
                arm: None,
                reason: "information matrix became singular".into(),
            });
        };
        let (next, next_ll) = halve_until_better(&beta, &step, ll, opts.max_halvings, &objective);
        beta = next;
        ll = next_ll;
    }
    unreachable!()
}

fn halve_until_better(
    beta: &DVector<f64>,
    step: &DVector<f64>,
    ll: f64,
    max_halvings: usize,
    objective: &dyn Fn(&DVector<f64>) -> f64,
) -> (DVector<f64>, f64) {
    let mut t = 1.0;
    for _ in 0..=max_halvings {
        let cand = beta + step * t;
        let cll = objective(&cand);
        if cll.is_finite() && cll >= ll - 1e-14 * ll.abs().max(1.0) {
            return (cand, cll);
        }
        t *= 0.5;
    }
    // no ascent found; keep the current point and let the iteration cap decide
    (beta.clone(), ll)
}

fn check_logistic_separation(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, opts: &SolverOptions) -> Result<()> {
    if beta.norm() > opts.divergence_bound {
        return Err(Error::Separation {
            arm: None,
            reason: format!("coefficient norm exceeds {}", opts.divergence_bound),
        });
    }
    let eta = x * beta;
    let ones_saturated = (0..x.nrows())
        .filter(|&i| y[i] > 0.5)
        .all(|i| expit(eta[i]) >= 1.0 - PROB_EDGE);
    let zeros_saturated = (0..x.nrows())
        .filter(|&i| y[i] <= 0.5)
        .all(|i| expit(eta[i]) <= PROB_EDGE);
    if ones_saturated || zeros_saturated {
        return Err(Error::Separation {
            arm: None,
            reason: "fitted probabilities numerically 0 or 1 for an entire class".into(),
        });
    }
    Ok(())
}

/// Multinomial logit fit; row `k` of `coefficients` holds `alpha_{k+1}` and
/// arm `J` is the reference level.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialFit {
    pub coefficients: DMatrix<f64>,
    pub num_arms: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
}

impl MultinomialFit {
    pub fn predict(&self, design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        predict_propensity(self, design)
    }
}

/// Arm probabilities (n x J) under a multinomial logit with reference arm J.
pub fn softmax_probabilities(design: &DMatrix<f64>, coefficients: &DMatrix<f64>) -> DMatrix<f64> {
    let n = design.nrows();
    let jm1 = coefficients.nrows();
    let eta = design * coefficients.transpose(); // n x (J-1)
    let mut out = DMatrix::zeros(n, jm1 + 1);
    for i in 0..n {
        let mx = eta.row(i).iter().copied().fold(0.0_f64, f64::max);
        let mut denom = (-mx).exp();
        for k in 0..jm1 {
            denom += (eta[(i, k)] - mx).exp();
        }
        for k in 0..jm1 {
            out[(i, k)] = (eta[(i, k)] - mx).exp() / denom;
        }
        out[(i, jm1)] = (-mx).exp() / denom;
    }
    out
}

pub fn predict_propensity(fit: &MultinomialFit, design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if design.ncols() != fit.coefficients.ncols() {
        return Err(Error::Dimension(format!(
            "design has {} columns, coefficients have {}",
            design.ncols(),
            fit.coefficients.ncols()
        )));
    }
    Ok(softmax_probabilities(design, &fit.coefficients))
}

/// Reshape stacked multinomial parameters (block `l` at `l*p..`) into `(J-1) x p`.
pub fn unflatten(theta: &DVector<f64>, jm1: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(jm1, p, |k, c| theta[k * p + c])
}

/// `sum_i log pi_{i, Z_i}`; `arms` are 1-based.
pub fn multinomial_loglik(v: &DMatrix<f64>, arms: &[usize], coefficients: &DMatrix<f64>) -> f64 {
    let pr = softmax_probabilities(v, coefficients);
    arms.iter().enumerate().map(|(i, &a)| pr[(i, a - 1)].ln()).sum()
}

/// Stacked score `sum_i V_i (D_il - pi_il)`, block `l` at `l*p..(l+1)*p`.
pub fn multinomial_score(v: &DMatrix<f64>, arms: &[usize], coefficients: &DMatrix<f64>) -> DVector<f64> {
    let pr = softmax_probabilities(v, coefficients);
    let jm1 = coefficients.nrows();
    let p = v.ncols();
    let mut g = DVector::zeros(jm1 * p);
    for i in 0..v.nrows() {
        for l in 0..jm1 {
            let r = f64::from(u8::from(arms[i] == l + 1)) - pr[(i, l)];
            for c in 0..p {
                g[l * p + c] += v[(i, c)] * r;
            }
        }
    }
    g
}

/// Full information `sum_i V_i V_i' pi_il (delta_lm - pi_im)` over all block pairs.
pub fn multinomial_information(v: &DMatrix<f64>, coefficients: &DMatrix<f64>) -> DMatrix<f64> {
    let pr = softmax_probabilities(v, coefficients);
    let jm1 = coefficients.nrows();
    let p = v.ncols();
    let mut h = DMatrix::zeros(jm1 * p, jm1 * p);
    for l in 0..jm1 {
        for m in l..jm1 {
            let wts: Vec<f64> = (0..v.nrows())
                .map(|i| pr[(i, l)] * (f64::from(u8::from(l == m)) - pr[(i, m)]))
                .collect();
            let block = weighted_gram(v, &wts);
            h.view_mut((l * p, m * p), (p, p)).copy_from(&block);
            if l != m {
                h.view_mut((m * p, l * p), (p, p)).copy_from(&block.transpose());
            }
        }
    }
    h
}

pub fn fit_multinomial(v: &DMatrix<f64>, arms: &[usize], num_arms: usize) -> Result<MultinomialFit> {
    fit_multinomial_with(v, arms, num_arms, &SolverOptions::default())
}

pub fn fit_multinomial_with(
    v: &DMatrix<f64>,
    arms: &[usize],
    num_arms: usize,
    opts: &SolverOptions,
) -> Result<MultinomialFit> {
    let n = v.nrows();
    if arms.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, arms {}", arms.len())));
    }
    if num_arms < 2 {
        return Err(Error::Dimension("need at least two arms".into()));
    }
    let mut counts = vec![0usize; num_arms];
    for &a in arms {
        if a == 0 || a > num_arms {
            return Err(Error::Dimension(format!("arm {a} outside 1..{num_arms}")));
        }
        counts[a - 1] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Separation {
            arm: Some(k + 1),
            reason: "arm not observed".into(),
        });
    }
    let bad = collinear_columns(v, RANK_TOL);
    if !bad.is_empty() {
        return Err(Error::Rank { columns: bad });
    }

    let jm1 = num_arms - 1;
    let p = v.ncols();
    let nf = n as f64;
    let objective = |t: &DVector<f64>| multinomial_loglik(v, arms, &unflatten(t, jm1, p)) / nf;

    let mut theta = DVector::zeros(jm1 * p);
    let mut ll = objective(&theta);
    for iter in 0..=opts.max_iter {
        let coef = unflatten(&theta, jm1, p);
        let g = multinomial_score(v, arms, &coef) / nf;
        let gnorm = max_abs(&g);
        let info = multinomial_information(v, &coef) / nf;
        let step = solve_spd(&info, &g);

        check_multinomial_separation(v, arms, &coef, opts)?;
        if gnorm <= opts.tol {
            if let Some(s) = &step {
                if max_abs(s) > FLAT_STEP {
                    return Err(Error::Separation {
                        arm: None,
                        reason: "likelihood is monotone along a diverging direction".into(),
                    });
                }
            }
            let coefficients = step.map_or(coef, |s| unflatten(&(&theta + s), jm1, p));
            return Ok(MultinomialFit {
                coefficients,
                num_arms,
                converged: true,
                iterations: iter,
                final_gradient_norm: gnorm,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::Convergence {
                arm: None,
                iterations: iter,
                gradient_norm: gnorm,
                last_iterate: theta.iter().copied().collect(),
            });
        }
        let Some(step) = step else {
            return Err(Error::Separation {
                arm: None,
                reason: "information matrix became singular".into(),
            });
        };
        let (next, next_ll) = halve_until_better(&theta, &step, ll, opts.max_halvings, &objective);
        theta = next;
        ll = next_ll;
    }
    unreachable!()
}

fn check_multinomial_separation(
    v: &DMatrix<f64>,
    arms: &[usize],
    coef: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<()> {
    if coef.norm() > opts.divergence_bound {
        return Err(Error::Separation {
            arm: None,
            reason: format!("coefficient norm exceeds {}", opts.divergence_bound),
        });
    }
    let pr = softmax_probabilities(v, coef);
    for k in 0..pr.ncols() {
        let members_saturated = (0..v.nrows())
            .filter(|&i| arms[i] == k + 1)
            .all(|i| pr[(i, k)] >= 1.0 - PROB_EDGE);
        let others_saturated = (0..v.nrows())
            .filter(|&i| arms[i] != k + 1)
            .all(|i| pr[(i, k)] <= PROB_EDGE);
        if members_saturated || others_saturated {
            return Err(Error::Separation {
                arm: Some(k + 1),
                reason: "fitted probabilities numerically 0 or 1 for an entire arm".into(),
            });
        }
    }
    Ok(())
}

use cipwr::data::{derive_coarsening, Dataset, SubjectRecord};
use cipwr::estimators::{contrasts_from_arms, estimate_cipwr_with, estimate_ipw, estimate_naive};
use cipwr::glm::{fit_weighted_logistic, logistic_information, logistic_loglik, logistic_score};
use cipwr::survival::{breslow, cox_partial_loglik, cox_score, jackknife_pseudo, kaplan_meier, km_survival_before, nelson_aalen};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn times(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<(f64, bool)>> {
    // coarse grid so ties are common
    prop::collection::vec(((1u32..20).prop_map(|k| k as f64 * 0.5), any::<bool>()), n)
}

fn central_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let h = 1e-5 * x[k].abs().max(1.0);
        let mut up = x.clone();
        let mut dn = x.clone();
        up[k] += h;
        dn[k] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn coarsening_invariants(t in prop::option::of(0.01f64..20.0), c in 0.01f64..20.0, d in 0.01f64..20.0) {
        let a = derive_coarsening(t, c, d).unwrap();
        prop_assert!(a.obs_time > 0.0 && a.obs_time <= d);
        prop_assert_eq!(a.response_observed, a.survival_indicator.is_some());
        if !a.response_observed {
            prop_assert_eq!(a.obs_time, c);
            prop_assert!(c < d);
        }
        if let Some(y) = a.survival_indicator {
            prop_assert_eq!(y, t.is_none_or(|t| t >= d));
        }
        if c >= d {
            prop_assert!(a.response_observed);
        }
        if let Some(t) = t {
            if t < c.min(d) {
                prop_assert!(a.response_observed);
                prop_assert_eq!(a.survival_indicator, Some(false));
            }
        }
        prop_assert_eq!(derive_coarsening(t, c, d).unwrap(), a);
    }

    #[test]
    fn logistic_gradient_and_information(
        rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, any::<bool>(), 0.1f64..3.0), 8..40),
        beta in prop::collection::vec(-1.5f64..1.5, 3),
    ) {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 3, |i, j| match j { 0 => 1.0, 1 => rows[i].0, _ => rows[i].1 });
        let y: Vec<f64> = rows.iter().map(|r| if r.2 { 1.0 } else { 0.0 }).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let b = DVector::from_vec(beta);
        let fd = central_gradient(|b| logistic_loglik(&x, &y, &w, b), &b);
        prop_assert!(rel_err(&logistic_score(&x, &y, &w, &b), &fd) < 1e-6);
        let eig = logistic_information(&x, &w, &b).symmetric_eigenvalues();
        prop_assert!(eig.min() >= -1e-10);
    }

    #[test]
    fn logistic_score_at_solution_and_weight_scaling(
        rows in prop::collection::vec((-2.0f64..2.0, 0.0f64..1.0, 0.2f64..3.0), 30..80),
        scale in 0.01f64..100.0,
    ) {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { rows[i].0 });
        // noisy labels keep the classes overlapping
        let y: Vec<f64> = rows.iter().map(|r| if r.1 < 0.5 + 0.2 * r.0.tanh() { 1.0 } else { 0.0 }).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let Ok(fit) = fit_weighted_logistic(&x, &y, &w) else { return Ok(()) };
        let total: f64 = w.iter().sum();
        prop_assert!(logistic_score(&x, &y, &w, &fit.coefficients).amax() / total <= 1e-8);
        let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let scaled = fit_weighted_logistic(&x, &y, &ws).unwrap();
        prop_assert!((&scaled.coefficients - &fit.coefficients).amax() < 1e-10);
    }

    #[test]
    fn breslow_at_zero_is_nelson_aalen_and_km_below_exp_na(data in times(2..40), x in prop::collection::vec(-1.0f64..1.0, 40)) {
        let t: Vec<f64> = data.iter().map(|d| d.0).collect();
        let s: Vec<f64> = data.iter().map(|d| if d.1 { 1.0 } else { 0.0 }).collect();
        let design = DMatrix::from_fn(t.len(), 1, |i, _| x[i]);
        let b = breslow(&design, &t, &s, &DVector::zeros(1));
        let na = nelson_aalen(&t, &s);
        let km = kaplan_meier(&t, &s);
        for k in 0..40 {
            let u = k as f64 * 0.25;
            prop_assert_eq!(b.eval(u), na.eval(u));
            prop_assert!(km.eval(u) <= (-na.eval(u)).exp() + 1e-15);
        }
    }

    #[test]
    fn cox_score_matches_finite_differences(
        data in times(6..40),
        x in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 40),
        gamma in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let t: Vec<f64> = data.iter().map(|d| d.0).collect();
        let s: Vec<f64> = data.iter().map(|d| if d.1 { 1.0 } else { 0.0 }).collect();
        prop_assume!(s.iter().any(|&v| v > 0.0));
        let design = DMatrix::from_fn(t.len(), 2, |i, j| if j == 0 { x[i].0 } else { x[i].1 });
        let g = DVector::from_vec(gamma);
        let fd = central_gradient(|g| cox_partial_loglik(&design, &t, &s, g), &g);
        prop_assert!(rel_err(&cox_score(&design, &t, &s, &g), &fd) < 1e-6);
    }

    #[test]
    fn jackknife_matches_brute_force(data in times(2..50), horizon in 1.0f64..9.0) {
        let t: Vec<f64> = data.iter().map(|d| d.0).collect();
        let s: Vec<f64> = data.iter().map(|d| if d.1 { 1.0 } else { 0.0 }).collect();
        let Ok(fast) = jackknife_pseudo(&t, &s, horizon) else { return Ok(()) };
        let n = t.len() as f64;
        let full = km_survival_before(&t, &s, horizon);
        for i in 0..t.len() {
            let (lt, ls): (Vec<f64>, Vec<f64>) = (0..t.len()).filter(|&k| k != i).map(|k| (t[k], s[k])).unzip();
            let loo = km_survival_before(&lt, &ls, horizon);
            prop_assert!((fast[i] - (n * full - (n - 1.0) * loo)).abs() < 1e-12);
        }
    }

    #[test]
    fn contrasts_are_antisymmetric(mu in prop::collection::vec(0.0f64..1.0, 2..6)) {
        let c = contrasts_from_arms(&mu);
        prop_assert_eq!(&c, &(-c.transpose()));
        for j in 0..mu.len() {
            prop_assert_eq!(c[(j, j)], 0.0);
        }
    }

    #[test]
    fn estimates_are_coherent(
        rows in prop::collection::vec((1usize..4, -1.0f64..1.0, prop::option::of(0.5f64..12.0), 1.0f64..15.0, 0.05f64..0.95), 30..80),
    ) {
        let d = 6.0;
        let mut recs: Vec<SubjectRecord> = rows.iter()
            .map(|&(a, x, t, c, _)| SubjectRecord::new(vec![x], a, t, Some(c), d).unwrap())
            .collect();
        for a in 1..=3 {
            recs.push(SubjectRecord::new(vec![0.0], a, Some(1.0), Some(20.0), d).unwrap());
            recs.push(SubjectRecord::new(vec![0.5], a, None, Some(20.0), d).unwrap());
        }
        let ds = Dataset::new(recs, d, 3).unwrap();
        let n = ds.len();
        let pi = DMatrix::from_fn(n, 3, |i, j| {
            let p = rows.get(i).map_or(0.4, |r| r.4);
            if j == 0 { p } else { (1.0 - p) / 2.0 }
        });
        for est in [estimate_naive(&ds).unwrap(), estimate_ipw(&ds, &pi).unwrap()] {
            for (s, r) in est.arm_survival.iter().zip(&est.arm_risk) {
                prop_assert!((s + r - 1.0).abs() < 1e-15);
            }
        }
        let uncensored: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7) % 10) as f64 / 10.0).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { ds.records()[i].covariates[0] });
        if let Ok(est) = estimate_cipwr_with(&ds, &pi, &uncensored, &x) {
            prop_assert!(est.arm_survival.iter().all(|m| (0.0..=1.0).contains(m)));
        }
        let order: Vec<usize> = (0..n).rev().collect();
        let rev = ds.subset(&order).unwrap();
        let pi_rev = DMatrix::from_fn(n, 3, |i, j| pi[(n - 1 - i, j)]);
        let a = estimate_ipw(&ds, &pi).unwrap().arm_survival;
        let b = estimate_ipw(&rev, &pi_rev).unwrap().arm_survival;
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}

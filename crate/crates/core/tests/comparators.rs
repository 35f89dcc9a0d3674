use cipwr::estimators::Method;
use cipwr::simgen::{run_monte_carlo, MonteCarloOptions, ScenarioConfig};

#[test]
fn comparators_are_unbiased_under_random_censoring() {
    let mut cfg = ScenarioConfig::setting_one_random_censoring();
    cfg.nrep = 500;
    cfg.seed = 60_606;
    cfg.truth_n = 1_000_000;
    cfg.bootstrap_replicates = 0;
    cfg.estimators = vec![Method::CaipwWang, Method::PseudoIpw, Method::Cipwr];
    let (table, _) = run_monte_carlo(&cfg, &MonteCarloOptions::default()).unwrap();
    for m in cfg.estimators.clone() {
        for a in 1..=3 {
            let bias = table.row(m, &format!("mu_{a}")).unwrap().bias;
            assert!(bias.abs() <= 0.01, "{m} arm {a}: {bias}");
        }
    }
}

//! Raising the static reversal weight shrinks the gap between forward and
//! reversed statics on held-out pairs.

use progfuse::analysis::reversal_report;
use progfuse::cohort::{generate_cohort, Episode};
use progfuse::config::ExperimentConfig;
use progfuse::train::train;

const FIXTURE: &str = r#"
task = "progression"
[loss]
pred = 2.0
orth = 1.0
temp = 0.0
pae = 2.0
static_rev = 0.0
[cohort]
n_patients = 150
feature_noise = 0.0
ehr_noise = 0.0
dem_noise = 0.0
[model]
dropout = 0.0
[train]
max_epochs = 8
patience = 8
learning_rate = 3e-3
"#;

fn static_gap(weight: f64) -> f64 {
    let mut cfg = ExperimentConfig::from_toml(FIXTURE).unwrap();
    cfg.loss.as_mut().unwrap().static_rev = weight;
    let (eps, _) = generate_cohort(&cfg.cohort).unwrap();
    let out = train(&cfg, &eps, 0).unwrap();
    let test: Vec<&Episode> = out.split.test.iter().map(|&i| &eps[i]).collect();
    reversal_report(&out.model, &test).unwrap().mean_static_gap
}

#[test]
fn static_gap_decreases_with_weight() {
    let gaps: Vec<f64> = [0.0, 0.1, 2.0].into_iter().map(static_gap).collect();
    assert!(gaps.iter().all(|g| g.is_finite()), "{gaps:?}");
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

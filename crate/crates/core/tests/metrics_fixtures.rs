mod common;

use stformer::metrics::{aggregate, MetricsConfig};

#[test]
fn fixture_reports_match_to_1e9() {
    let f = common::load_fixture();
    assert!(f.cases.len() >= 10);
    for (name, dev) in common::fixture_deviations(&f) {
        assert!(dev < 1e-9, "{name}: deviation {dev}");
    }
}

#[test]
fn ols_stays_in_range_and_is_gated() {
    let f = common::load_fixture();
    for c in &f.cases {
        let r = c.report();
        assert!((0.0..=100.0).contains(&r.ols), "{}", c.name);
        if r.score_miss == 0.0 {
            assert_eq!(r.ols, 0.0);
        }
    }
}

#[test]
fn adding_modes_never_raises_minimums() {
    let f = common::load_fixture();
    let c = f.cases.iter().find(|c| c.modes.len() == 3).unwrap();
    let gt = common::ground_truth();
    let pred = c.prediction(0);
    let mut prev = (f64::INFINITY, f64::INFINITY);
    for k in 1..=pred.modes.len() {
        let m = stformer::metrics::multimodal_metrics(&pred.modes[..k], &gt).unwrap();
        assert!(m.min_ade <= prev.0 && m.min_fde <= prev.1);
        prev = (m.min_ade, m.min_fde);
    }
}

#[test]
fn empty_set_has_undefined_rate() {
    assert!(matches!(
        aggregate(&[], &MetricsConfig::default()),
        Err(stformer::Error::UndefinedRate)
    ));
}

use dtebounds::model::{read_table, write_csv, CsvSchema};
use dtebounds::sim::{draw_dgp, DgpSpec};
use dtebounds::{estimate_crossfit, make_folds, makarov_bounds, AdjusterPlan, GridSpec, Learner, ModelSpec};
use proptest::prelude::*;

#[test]
fn learned_adjusters_tighten_bounds_on_the_study_design() {
    let draw = draw_dgp(&DgpSpec::default(), 1500, 17).unwrap();
    let s = draw.sample;
    let plain = makarov_bounds(&s).unwrap();
    let mut learner = Learner::new(&[ModelSpec::RidgeLocShift { lambda: None }]);
    learner.grid = GridSpec::RandomNormal { size: 2000 };
    let folds = make_folds(&s, 5, 1).unwrap();
    let cf = estimate_crossfit(&s, &folds, &AdjusterPlan::Learned(learner), 2).unwrap();
    let width = |l: f64, u: f64| u - l;
    assert!(
        width(cf.estimate.theta_l, cf.estimate.theta_u) < width(plain.theta_l, plain.theta_u) - 0.1,
        "adjusted [{}, {}] vs unadjusted [{}, {}]",
        cf.estimate.theta_l,
        cf.estimate.theta_u,
        plain.theta_l,
        plain.theta_u
    );
}

#[test]
fn csv_round_trip_preserves_the_sample() {
    let draw = draw_dgp(&DgpSpec::default(), 64, 3).unwrap();
    let s = draw.observe(5).unwrap();
    let mut buf = Vec::new();
    write_csv(&s, &CsvSchema::default(), &mut buf).unwrap();
    let back = read_table(buf.as_slice(), &CsvSchema::default()).unwrap().sample;
    assert_eq!(back.y(), s.y());
    assert_eq!(back.d(), s.d());
    assert_eq!(back.x_flat(), s.x_flat());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Bounds on `P(Y(1) - Y(0) <= delta)` never decrease as `delta` grows.
    #[test]
    fn unadjusted_bounds_are_monotone_in_delta(
        seed in 0u64..1000,
        a in -3.0f64..3.0,
        step in 0.0f64..2.0,
    ) {
        let s = draw_dgp(&DgpSpec::default(), 80, seed).unwrap().observe(0).unwrap();
        let lo = makarov_bounds(&s.shift_for_delta(a).unwrap()).unwrap();
        let hi = makarov_bounds(&s.shift_for_delta(a + step).unwrap()).unwrap();
        prop_assert!(hi.theta_l >= lo.theta_l);
        prop_assert!(hi.theta_u >= lo.theta_u);
        prop_assert!(lo.theta_l <= lo.theta_u);
    }
}

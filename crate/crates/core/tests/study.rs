use nlmemboot::stats::Interval;
use nlmemboot::study::{coverage_rate, run_replicate, run_study, scenario_preset, Method, ScenarioSpec, StudyOptions, StudyStore};
use nlmemboot::Error;
use proptest::prelude::*;

fn small(methods: &[Method], k: usize) -> ScenarioSpec {
    let mut s = scenario_preset("rich_emax").unwrap();
    s.k = k;
    s.b = 2;
    s.m = 5;
    s.methods = methods.to_vec();
    s
}

#[test]
fn one_rich_emax_replicate_has_positive_fixed_effects() {
    let s = small(&[Method::Asymptotic], 1);
    let r = run_replicate(&s, 0, 99).unwrap();
    let est = r.estimate.expect("fit succeeds");
    for v in &est[..3] {
        assert!(v.is_finite() && *v > 0.0, "{est:?}");
    }
}

#[test]
fn replicate_is_reproducible_from_its_seed() {
    let s = small(&[Method::Asymptotic, Method::Case, Method::Cnp], 2);
    let a = run_study(&s, 5, &StudyOptions::default()).unwrap();
    let b = run_study(&s, 5, &StudyOptions::default()).unwrap();
    assert_eq!(a.records[0], b.records[0]);
    assert_eq!(a.records[1], b.records[1]);
    assert_ne!(a.records[0].estimate, a.records[1].estimate);
}

#[test]
fn single_replicate_coverage_is_zero_or_one() {
    let s = small(&[Method::Asymptotic, Method::Par], 1);
    let res = run_study(&s, 1, &StudyOptions::default()).unwrap();
    assert!(!res.report.coverage.is_empty());
    for row in &res.report.coverage {
        let c = row.coverage.unwrap();
        assert!(c == 0.0 || c == 1.0, "{row:?}");
    }
}

#[test]
fn report_does_not_depend_on_thread_count() {
    let s = small(&[Method::Asymptotic, Method::Case, Method::Np], 3);
    let one = run_study(&s, 21, &StudyOptions { parallelism: 1, ..Default::default() }).unwrap();
    let four = run_study(&s, 21, &StudyOptions { parallelism: 4, ..Default::default() }).unwrap();
    assert_eq!(one.report, four.report);
    assert_eq!(one.records, four.records);
}

#[test]
fn interrupted_study_resumes_from_saved_records() {
    let tmp = tempfile::tempdir().unwrap();
    let s = small(&[Method::Asymptotic, Method::Par], 3);
    let options = StudyOptions { store: Some(StudyStore::new(tmp.path())), ..Default::default() };
    let full = run_study(&s, 8, &options).unwrap();
    assert_eq!(full.resumed, 0);

    // simulate an interruption that lost one replicate
    std::fs::remove_file(tmp.path().join("replicates/00001.json")).unwrap();
    let resumed = run_study(&s, 8, &options).unwrap();
    assert_eq!(resumed.resumed, 2);
    assert_eq!(resumed.report, full.report);

    let (scenario, seed, records) = StudyStore::new(tmp.path()).load_all().unwrap();
    assert_eq!((scenario, seed), (s.clone(), 8));
    assert_eq!(records, full.records);

    // a different master seed must not reuse these records
    match run_study(&s, 9, &options) {
        Err(Error::InvalidConfig(_)) => {}
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn missing_study_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(StudyStore::new(tmp.path()).load_all(), Err(Error::MissingPrerequisite(_))));
}

proptest! {
    // containment only depends on order, so any strictly increasing map of
    // intervals and truth leaves the coverage unchanged
    #[test]
    fn coverage_is_invariant_under_monotone_maps(
        raw in prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0, any::<bool>()), 1..40),
        truth in -5.0f64..5.0,
    ) {
        let intervals: Vec<Option<Interval>> = raw
            .iter()
            .map(|&(lo, w, present)| present.then_some(Interval { lower: lo, upper: lo + w }))
            .collect();
        let mapped: Vec<Option<Interval>> = intervals
            .iter()
            .map(|i| i.map(|i| Interval { lower: i.lower.exp(), upper: i.upper.exp() }))
            .collect();
        prop_assert_eq!(coverage_rate(&intervals, truth), coverage_rate(&mapped, truth.exp()));
    }
}

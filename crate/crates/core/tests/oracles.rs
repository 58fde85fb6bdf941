use domainsat_core::algorithms::Algorithm;
use domainsat_core::cdi::{cdi_report, CdiConfig};
use domainsat_core::head::{generate_scenario, ScenarioConfig, ScenarioKind};
use domainsat_core::ingest::{read_features, read_report, report_to_csv, write_features, write_report, Format, Report};
use domainsat_core::metrics::{mmd_squared, wasserstein_1d, Bandwidth, MetricConfig};
use domainsat_core::pipeline::{run_batched_study, run_shift_analysis, StudyConfig, StudyData};
use domainsat_core::{AnalysisConfig, FeatureMatrix};
use proptest::prelude::*;

fn scenario(kind: ScenarioKind, seed: u64) -> domainsat_core::head::Scenario {
    generate_scenario(&ScenarioConfig { kind, n: 200, d: 4, seed, ..ScenarioConfig::default() }).unwrap()
}

fn both(s: &domainsat_core::head::Scenario) -> StudyData<'_> {
    StudyData { features: Some(&s.features), predictions: Some(&s.predictions) }
}

#[test]
fn reports_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (scenario(ScenarioKind::Id, 1), scenario(ScenarioKind::HarmfulShift, 2));

    let shift = run_shift_analysis(&a.features, &b.features, &[Algorithm::Mmd, Algorithm::Ks, Algorithm::C2stLogistic], &AnalysisConfig::default(), None, 3).unwrap();
    let cdi = cdi_report(&a.predictions, &b.predictions, &CdiConfig::default()).unwrap();
    let config = StudyConfig { n_batches: 4, batch_size: 50, metrics: vec![Algorithm::Wasserstein], ..StudyConfig::default() };
    let study = run_batched_study(both(&a), both(&b), &config, None, 4).unwrap();

    for report in [
        Report::shift(shift).unwrap(),
        Report::cdi(cdi, &CdiConfig::default(), 0).unwrap(),
        Report::study(study).unwrap(),
    ] {
        let path = dir.path().join(format!("{}.json", report.kind()));
        write_report(&report, &path, Format::Json).unwrap();
        assert_eq!(read_report(&path).unwrap(), report);
    }
}

#[test]
fn study_csv_has_one_row_per_batch_plus_summaries() {
    let (a, b) = (scenario(ScenarioKind::Id, 5), scenario(ScenarioKind::BenignShift, 6));
    let config = StudyConfig { n_batches: 7, batch_size: 40, metrics: vec![Algorithm::Mahalanobis], ..StudyConfig::default() };
    let study = run_batched_study(StudyData { predictions: None, ..both(&a) }, StudyData { predictions: None, ..both(&b) }, &config, None, 8).unwrap();
    let mut out = Vec::new();
    report_to_csv(&Report::study(study).unwrap(), &mut out).unwrap();
    let mut reader = csv::Reader::from_reader(out.as_slice());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 7 + 2);
    assert_eq!(&rows[7][0], "mean");
    assert_eq!(&rows[8][0], "std");
}

#[test]
fn feature_csv_round_trip_is_lossless() {
    let s = scenario(ScenarioKind::BenignShift, 9);
    let mut buf = Vec::new();
    write_features(&s.features, &mut buf).unwrap();
    let back = read_features(buf.as_slice(), None).unwrap();
    assert_eq!(back.n(), s.features.n());
    for (x, y) in back.rows().zip(s.features.rows()) {
        assert_eq!(x, y);
    }
    assert_eq!(back.labels(), s.features.labels());
}

fn rows(max_n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), 2..max_n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_nonnegative_and_symmetric(x in rows(12, 3), y in rows(12, 3), sigma in 0.3f64..3.0) {
        let c = MetricConfig { kernel_bandwidth: Bandwidth::Fixed(sigma), ..MetricConfig::default() };
        let (fx, fy) = (FeatureMatrix::from_rows(x, None).unwrap(), FeatureMatrix::from_rows(y, None).unwrap());
        let xy = mmd_squared(&fx, &fy, &c).unwrap().raw_value;
        let yx = mmd_squared(&fy, &fx, &c).unwrap().raw_value;
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() <= 1e-12);
    }

    #[test]
    fn wasserstein_of_a_translation_is_the_offset(x in prop::collection::vec(-5.0f64..5.0, 1..30), t in -3.0f64..3.0) {
        let y: Vec<f64> = x.iter().map(|v| v + t).collect();
        prop_assert!((wasserstein_1d(&x, &y) - t.abs()).abs() <= 1e-9);
    }
}

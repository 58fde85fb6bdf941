//! End-to-end analyses: shift reports, batched studies and histograms.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, Category};
use crate::baseline::{build_baseline, normalize_score, scalar_score};
use crate::cdi::{auc, cdi_entropy, cdi_margin, CdiConfig};
use crate::detectors::{run_detector, DetectorConfig, DetectorResult};
use crate::error::{Error, Result};
use crate::metrics::{run_metric, MetricConfig};
use crate::model::{derive_seed, sample_indices, BaselineProfile, FeatureMatrix, HistogramSummary, PredictionSet, ShiftScore, TestResult};
use crate::stat_tests::{per_feature_suite, TestConfig};
use crate::stats::{mean, sample_std};

/// Parameters for every algorithm family, one section each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub metric: MetricConfig,
    pub test: TestConfig,
    pub detector: DetectorConfig,
    pub cdi: CdiConfig,
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        self.test.validate()?;
        self.detector.validate()?;
        self.cdi.validate()
    }

    /// Sets the seed of every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.metric.seed = seed;
        self.test.seed = seed;
        self.detector.seed = seed;
        self
    }
}

/// One algorithm that failed inside an otherwise successful report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmError {
    pub algorithm: Algorithm,
    pub code: String,
    pub message: String,
}

impl AlgorithmError {
    fn new(algorithm: Algorithm, e: &Error) -> Self {
        AlgorithmError {
            algorithm,
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// The deduplicated selection, in request order.
    pub algorithms: Vec<Algorithm>,
    pub scores: Vec<ShiftScore>,
    pub tests: Vec<TestResult>,
    pub detectors: Vec<DetectorResult>,
    #[serde(default)]
    pub errors: Vec<AlgorithmError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_used: Option<BaselineProfile>,
    pub config: AnalysisConfig,
    pub seed: u64,
    pub n_reference: usize,
    pub n_target: usize,
    pub d: usize,
}

impl ShiftReport {
    /// True when any hypothesis test rejected.
    pub fn alarm(&self) -> bool {
        self.tests.iter().any(|t| t.alarm)
    }
}

enum Outcome {
    Score(ShiftScore),
    Test(TestResult),
    Detector(DetectorResult),
}

fn dedup(algorithms: &[Algorithm]) -> Vec<Algorithm> {
    let mut out: Vec<Algorithm> = Vec::with_capacity(algorithms.len());
    for &a in algorithms {
        if !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

/// Runs every selected algorithm on `(reference, target)`.
///
/// Only a width mismatch, an invalid config or a non-feature algorithm in
/// the selection abort; anything else is recorded in `errors` and the
/// remaining algorithms still run.
pub fn run_shift_analysis(
    reference: &FeatureMatrix,
    target: &FeatureMatrix,
    algorithms: &[Algorithm],
    config: &AnalysisConfig,
    profile: Option<&BaselineProfile>,
    seed: u64,
) -> Result<ShiftReport> {
    reference.check_same_width(target)?;
    let config = config.clone().with_seed(seed);
    config.validate()?;
    let algorithms = dedup(algorithms);
    if let Some(bad) = algorithms.iter().find(|a| a.category() == Category::Output) {
        return Err(Error::InvalidConfig(format!(
            "'{bad}' runs on prediction sets, not feature matrices"
        )));
    }

    let fold = |a: Algorithm, raw: f64| profile.and_then(|p| normalize_score(raw, a, p).ok());
    let outcomes: Vec<(Algorithm, Result<Outcome>)> = algorithms
        .par_iter()
        .map(|&a| {
            let r = match a.category() {
                Category::Distance => run_metric(a, reference, target, &config.metric).map(|mut s| {
                    s.fold_value = fold(a, s.raw_value);
                    Outcome::Score(s)
                }),
                Category::Statistic => per_feature_suite(reference, target, a, &config.test).map(Outcome::Test),
                Category::Ml => run_detector(a, reference, target, &config.detector).map(|mut s| {
                    s.fold_value = fold(a, s.score);
                    Outcome::Detector(s)
                }),
                Category::Output => unreachable!("rejected above"),
            };
            (a, r)
        })
        .collect();

    let mut report = ShiftReport {
        algorithms: algorithms.clone(),
        scores: Vec::new(),
        tests: Vec::new(),
        detectors: Vec::new(),
        errors: Vec::new(),
        baseline_used: profile.cloned(),
        config,
        seed,
        n_reference: reference.n(),
        n_target: target.n(),
        d: reference.d(),
    };
    for (a, r) in outcomes {
        match r {
            Ok(Outcome::Score(s)) => report.scores.push(s),
            Ok(Outcome::Test(t)) => report.tests.push(t),
            Ok(Outcome::Detector(d)) => report.detectors.push(d),
            Err(e) => report.errors.push(AlgorithmError::new(a, &e)),
        }
    }
    Ok(report)
}

/// One side of a study: features for the shift metrics, predictions for the
/// confidence indicators. Row `i` of both refers to the same sample.
#[derive(Debug, Clone, Copy)]
pub struct StudyData<'a> {
    pub features: Option<&'a FeatureMatrix>,
    pub predictions: Option<&'a PredictionSet>,
}

impl StudyData<'_> {
    fn len(&self) -> Result<usize> {
        match (self.features, self.predictions) {
            (Some(f), Some(p)) if f.n() != p.len() => Err(Error::Schema(format!(
                "{} feature rows but {} predictions",
                f.n(),
                p.len()
            ))),
            (Some(f), _) => Ok(f.n()),
            (None, Some(p)) => Ok(p.len()),
            (None, None) => Err(Error::InsufficientData("study needs features or predictions".into())),
        }
    }

    fn labels(&self) -> Option<&[u8]> {
        self.predictions
            .and_then(PredictionSet::labels)
            .or_else(|| self.features.and_then(FeatureMatrix::labels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_batches: usize,
    pub batch_size: usize,
    /// Shift metrics or detectors to score per batch.
    pub metrics: Vec<Algorithm>,
    /// Draw 50:50 batches when labels are present.
    pub stratify: bool,
    pub with_replacement: bool,
    pub analysis: AnalysisConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_batches: 20,
            batch_size: 5000,
            metrics: Vec::new(),
            stratify: true,
            with_replacement: true,
            analysis: AnalysisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// 1-based.
    pub batch: usize,
    pub raw_scores: BTreeMap<Algorithm, f64>,
    pub fold_scores: BTreeMap<Algorithm, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdi_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdi_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_cdi_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_cdi_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_auc: Option<f64>,
}

impl BatchRecord {
    /// Named numeric columns, in a stable order.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (a, v) in &self.raw_scores {
            out.push((format!("raw_{a}"), *v));
        }
        for (a, v) in &self.fold_scores {
            out.push((format!("fold_{a}"), *v));
        }
        let opt = [
            ("cdi_m", self.cdi_m),
            ("cdi_h", self.cdi_h),
            ("delta_cdi_m", self.delta_cdi_m),
            ("delta_cdi_h", self.delta_cdi_h),
            ("auc", self.auc),
            ("delta_auc", self.delta_auc),
        ];
        out.extend(opt.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchedStudyReport {
    pub records: Vec<BatchRecord>,
    pub aggregates: IndexMap<String, ColumnSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_cdi_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_cdi_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_used: Option<BaselineProfile>,
    pub config: StudyConfig,
    /// Whether batch sampling drew with replacement.
    pub sampling: String,
    pub seed: u64,
}

/// Seed offset for a baseline built inside a study, so its batches are
/// independent of the study's own batches.
const STUDY_BASELINE_TAG: u64 = 0xBA5E_11E5;

/// Scores `n_batches` resampled target batches against the full reference.
///
/// Batch `b` draws rows with `derive_seed(seed, b)`. When metrics are
/// selected and no profile is given, a baseline is built from the reference
/// with the same batch count and size.
pub fn run_batched_study(
    reference: StudyData<'_>,
    target: StudyData<'_>,
    config: &StudyConfig,
    profile: Option<&BaselineProfile>,
    seed: u64,
) -> Result<BatchedStudyReport> {
    let mut config = config.clone();
    config.analysis = config.analysis.with_seed(seed);
    config.analysis.validate()?;
    config.metrics = dedup(&config.metrics);
    if let Some(bad) = config.metrics.iter().find(|m| !m.is_scalar_shift()) {
        return Err(Error::InvalidConfig(format!("'{bad}' is not a per-batch shift score")));
    }
    if config.n_batches == 0 {
        return Err(Error::InvalidConfig("n_batches must be at least 1".into()));
    }
    if config.batch_size < 2 {
        return Err(Error::InvalidBatchSize(format!("batch size must be at least 2, got {}", config.batch_size)));
    }
    reference.len()?;
    let n_tgt = target.len()?;
    if n_tgt < 2 {
        return Err(Error::TooFewSamples("target needs at least 2 samples".into()));
    }
    if !config.metrics.is_empty() {
        let (Some(r), Some(t)) = (reference.features, target.features) else {
            return Err(Error::InsufficientData("shift metrics need feature matrices on both sides".into()));
        };
        r.check_same_width(t)?;
    }
    let with_preds = reference.predictions.is_some() && target.predictions.is_some();
    if !with_preds && config.metrics.is_empty() {
        return Err(Error::InsufficientData("study needs metrics or predictions on both sides".into()));
    }

    let built;
    let profile = match (profile, config.metrics.is_empty()) {
        (Some(p), _) => Some(p),
        (None, true) => None,
        (None, false) => {
            built = build_baseline(
                reference.features.expect("checked above"),
                &config.metrics,
                config.n_batches.max(2),
                config.batch_size,
                &config.analysis,
                derive_seed(seed, STUDY_BASELINE_TAG),
            )?;
            Some(&built)
        }
    };

    let cdi_cfg = &config.analysis.cdi;
    let (ref_m, ref_h, ref_auc) = match reference.predictions.filter(|_| with_preds) {
        Some(p) => (Some(cdi_margin(p, cdi_cfg)?), Some(cdi_entropy(p)?), p.labels().map(|_| auc(p)).transpose()?),
        None => (None, None, None),
    };
    let ratio = if config.stratify { target.labels().map(|_| 0.5) } else { None };

    let records: Vec<BatchRecord> = (0..config.n_batches)
        .into_par_iter()
        .map(|b| {
            let s = derive_seed(seed, b as u64);
            let idx = sample_indices(n_tgt, target.labels(), config.batch_size, ratio, config.with_replacement, s)?;
            let mut rec = BatchRecord {
                batch: b + 1,
                raw_scores: BTreeMap::new(),
                fold_scores: BTreeMap::new(),
                cdi_m: None,
                cdi_h: None,
                delta_cdi_m: None,
                delta_cdi_h: None,
                auc: None,
                delta_auc: None,
            };
            if !config.metrics.is_empty() {
                let r = reference.features.expect("checked above");
                let batch = target.features.expect("checked above").select_rows(&idx);
                for &m in &config.metrics {
                    let raw = scalar_score(m, r, &batch, &config.analysis, s)?;
                    rec.raw_scores.insert(m, raw);
                    if let Some(p) = profile {
                        rec.fold_scores.insert(m, normalize_score(raw, m, p)?);
                    }
                }
            }
            if let (Some(tp), true) = (target.predictions, with_preds) {
                let batch = tp.select(&idx);
                let m = cdi_margin(&batch, cdi_cfg)?;
                let h = cdi_entropy(&batch)?;
                rec.cdi_m = Some(m);
                rec.cdi_h = Some(h);
                rec.delta_cdi_m = ref_m.map(|r| m - r);
                rec.delta_cdi_h = ref_h.map(|r| h - r);
                if let (Some(ra), Some(_)) = (ref_auc, batch.labels()) {
                    let a = auc(&batch)?;
                    rec.auc = Some(a);
                    rec.delta_auc = Some(a - ra);
                }
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;

    Ok(BatchedStudyReport {
        aggregates: aggregate(&records),
        records,
        reference_cdi_m: ref_m,
        reference_cdi_h: ref_h,
        reference_auc: ref_auc,
        baseline_used: profile.cloned(),
        sampling: if config.with_replacement { "with_replacement" } else { "without_replacement" }.to_string(),
        config,
        seed,
    })
}

/// Mean and sample std of every record column.
pub fn aggregate(records: &[BatchRecord]) -> IndexMap<String, ColumnSummary> {
    let mut cols: IndexMap<String, Vec<f64>> = IndexMap::new();
    for r in records {
        for (k, v) in r.columns() {
            cols.entry(k).or_default().push(v);
        }
    }
    cols.into_iter()
        .map(|(k, v)| {
            (
                k,
                ColumnSummary {
                    mean: mean(&v),
                    std: sample_std(&v),
                },
            )
        })
        .collect()
}

/// Histogram selector over a prediction set's positive-class posterior.
pub const SELECTOR_P_POSITIVE: &str = "p_positive";
/// Same, split into true-normal and true-tumor groups per dataset.
pub const SELECTOR_P_SPLIT: &str = "p_positive split by label";
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy)]
pub enum HistogramSource<'a> {
    Features(&'a FeatureMatrix),
    Predictions(&'a PredictionSet),
}

/// Counts every group on one shared set of equal-width edges.
///
/// Probability selectors use the fixed range [0, 1]; feature selectors use
/// the pooled min and max (widened by 0.5 on each side when constant).
pub fn feature_histogram(groups: &[(String, HistogramSource<'_>)], selector: &str, bins: usize, normalized: bool) -> Result<HistogramSummary> {
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be at least 1".into()));
    }
    if groups.is_empty() {
        return Err(Error::InsufficientData("histogram needs at least one group".into()));
    }
    let probability = selector == SELECTOR_P_POSITIVE || selector == SELECTOR_P_SPLIT;
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, src) in groups {
        match (src, selector) {
            (HistogramSource::Predictions(p), SELECTOR_P_POSITIVE) => series.push((name.clone(), p.p_positive().to_vec())),
            (HistogramSource::Predictions(p), SELECTOR_P_SPLIT) => {
                let labels = p.labels().ok_or(Error::MissingLabels)?;
                for (class, tag) in [(0u8, "true normal"), (1u8, "true tumor")] {
                    let v = p.p_positive().iter().zip(labels).filter(|(_, &y)| y == class).map(|(&x, _)| x).collect();
                    series.push((format!("{name}/{tag}"), v));
                }
            }
            (HistogramSource::Features(f), sel) if !probability => {
                let j = f.feature_index(sel).ok_or_else(|| Error::UnknownFeature(sel.to_string()))?;
                series.push((name.clone(), f.column(j)));
            }
            _ => return Err(Error::UnknownFeature(selector.to_string())),
        }
    }

    let (mut lo, mut hi) = if probability {
        (0.0, 1.0)
    } else {
        let all = series.iter().flat_map(|(_, v)| v.iter().copied());
        all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
    };
    if !lo.is_finite() {
        return Err(Error::EmptySample);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = hi - lo;
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64 / bins as f64).collect();
    edges[bins] = hi;

    let mut counts_per_group = IndexMap::new();
    for (name, values) in &series {
        let mut counts = vec![0u64; bins];
        for &x in values {
            let k = (((x - lo) / width) * bins as f64).floor();
            counts[(k.max(0.0) as usize).min(bins - 1)] += 1;
        }
        counts_per_group.insert(name.clone(), counts);
    }
    let frequencies = normalized.then(|| {
        counts_per_group
            .iter()
            .map(|(k, c)| {
                let total: u64 = c.iter().sum();
                let f = c.iter().map(|&x| if total > 0 { x as f64 / total as f64 } else { 0.0 }).collect();
                (k.clone(), f)
            })
            .collect()
    });
    Ok(HistogramSummary {
        selector: selector.to_string(),
        bins,
        bin_edges: edges,
        counts_per_group,
        normalized,
        frequencies,
    })
}

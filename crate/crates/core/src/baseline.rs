//! In-distribution baselines and fold normalization.
//!
//! A baseline is the mean score of batches resampled from the reference and
//! scored against the full reference. Dividing a raw score by it expresses a
//! shift as a multiple of ordinary within-reference variation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::algorithms::{Algorithm, Category};
use crate::detectors::run_detector;
use crate::error::{Error, Result};
use crate::metrics::{mmd_squared_resampled, run_metric};
use crate::model::{derive_seed, sample_indices, BaselineProfile, FeatureMatrix};
use crate::pipeline::AnalysisConfig;
use crate::stats::mean;

pub const DEFAULT_BATCHES: usize = 20;

/// Scalar score of a distance metric or learned detector, with its
/// randomness drawn from `seed`.
pub fn scalar_score(algorithm: Algorithm, reference: &FeatureMatrix, target: &FeatureMatrix, config: &AnalysisConfig, seed: u64) -> Result<f64> {
    match algorithm.category() {
        Category::Distance => {
            let mut c = config.metric.clone();
            c.seed = seed;
            Ok(run_metric(algorithm, reference, target, &c)?.raw_value)
        }
        Category::Ml => {
            let mut c = config.detector.clone();
            c.seed = seed;
            Ok(run_detector(algorithm, reference, target, &c)?.score)
        }
        _ => Err(Error::InvalidConfig(format!(
            "'{algorithm}' does not produce a shift score and cannot be baselined"
        ))),
    }
}

/// Batch `b` uses seed `derive_seed(seed, b)`: it picks the rows (with
/// replacement, 50:50 when labeled) and seeds every metric in that batch.
/// MMD skips kernel pairs between copies of one reference row.
pub fn build_baseline(
    reference: &FeatureMatrix,
    metrics: &[Algorithm],
    n_batches: usize,
    batch_size: usize,
    config: &AnalysisConfig,
    seed: u64,
) -> Result<BaselineProfile> {
    let metrics: BTreeSet<Algorithm> = metrics.iter().copied().collect();
    if metrics.is_empty() {
        return Err(Error::InvalidConfig("baseline needs at least one metric".into()));
    }
    if let Some(bad) = metrics.iter().find(|m| !m.is_scalar_shift()) {
        return Err(Error::InvalidConfig(format!(
            "'{bad}' does not produce a shift score and cannot be baselined"
        )));
    }
    if n_batches < 2 {
        return Err(Error::InvalidConfig(format!("a baseline needs at least 2 batches, got {n_batches}")));
    }
    if batch_size < 2 {
        return Err(Error::InvalidBatchSize(format!("batch size must be at least 2, got {batch_size}")));
    }
    config.validate()?;
    let ratio = reference.labels().map(|_| 0.5);

    let per_batch: Vec<Vec<f64>> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let s = derive_seed(seed, b as u64);
            let idx = sample_indices(reference.n(), reference.labels(), batch_size, ratio, true, s)?;
            let batch = reference.select_rows(&idx);
            metrics
                .iter()
                .map(|&m| match m {
                    Algorithm::Mmd => {
                        let mut c = config.metric.clone();
                        c.seed = s;
                        Ok(mmd_squared_resampled(reference, &idx, &c)?.raw_value)
                    }
                    _ => scalar_score(m, reference, &batch, config, s),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut batch_scores = BTreeMap::new();
    for (k, &m) in metrics.iter().enumerate() {
        batch_scores.insert(m, per_batch.iter().map(|row| row[k]).collect::<Vec<f64>>());
    }
    let values: Vec<(Algorithm, f64)> = batch_scores.iter().map(|(&m, v)| (m, mean(v))).collect();
    let mut profile = BaselineProfile::from_values(values, n_batches, batch_size, seed)?;
    profile.batch_scores = batch_scores;
    Ok(profile)
}

/// `max(raw, 0) / baseline[metric]`.
pub fn normalize_score(raw: f64, metric: Algorithm, profile: &BaselineProfile) -> Result<f64> {
    let base = profile
        .get(metric)
        .ok_or_else(|| Error::UnknownMetric(format!("{metric} (not in baseline profile)")))?;
    Ok(raw.max(0.0) / base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BASELINE_FLOOR;

    fn data(n: usize, d: usize) -> FeatureMatrix {
        let rows = (0..n).map(|i| (0..d).map(|j| ((i * 7 + j * 3) % 11) as f64).collect()).collect();
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        FeatureMatrix::from_rows(rows, Some(labels)).unwrap()
    }

    #[test]
    fn worked_example() {
        let p = BaselineProfile::from_values([(Algorithm::Mmd, 5.0)], 20, 5000, 0).unwrap();
        assert_eq!(normalize_score(100.0, Algorithm::Mmd, &p).unwrap(), 20.0);
        assert_eq!(normalize_score(5.0, Algorithm::Mmd, &p).unwrap(), 1.0);
        assert_eq!(normalize_score(0.0, Algorithm::Mmd, &p).unwrap(), 0.0);
        assert_eq!(normalize_score(-3.0, Algorithm::Mmd, &p).unwrap(), 0.0);
        assert!(matches!(normalize_score(1.0, Algorithm::Kl, &p), Err(Error::UnknownMetric(_))));
    }

    #[test]
    fn constant_data_floors() {
        let r = FeatureMatrix::from_rows(vec![vec![1.0, 2.0]; 30], None).unwrap();
        let p = build_baseline(&r, &[Algorithm::Wasserstein], 4, 10, &AnalysisConfig::default(), 1).unwrap();
        assert_eq!(p.get(Algorithm::Wasserstein), Some(BASELINE_FLOOR));
        assert_eq!(p.batch_scores[&Algorithm::Wasserstein], vec![0.0; 4]);
    }

    #[test]
    fn order_invariant_and_deterministic() {
        let r = data(60, 3);
        let c = AnalysisConfig::default();
        let a = build_baseline(&r, &[Algorithm::Wasserstein, Algorithm::Mahalanobis], 5, 20, &c, 9).unwrap();
        let b = build_baseline(&r, &[Algorithm::Mahalanobis, Algorithm::Wasserstein], 5, 20, &c, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_batches, 5);
        assert_eq!(a.batch_size, 20);
        let w = &a.batch_scores[&Algorithm::Wasserstein];
        assert_eq!(a.get(Algorithm::Wasserstein).unwrap(), w.iter().sum::<f64>() / 5.0);
    }

    #[test]
    fn rejects_bad_requests() {
        let r = data(20, 2);
        let c = AnalysisConfig::default();
        assert!(build_baseline(&r, &[], 5, 10, &c, 0).is_err());
        assert!(build_baseline(&r, &[Algorithm::Ks], 5, 10, &c, 0).is_err());
        assert!(matches!(build_baseline(&r, &[Algorithm::Mmd], 5, 0, &c, 0), Err(Error::InvalidBatchSize(_))));
    }
}

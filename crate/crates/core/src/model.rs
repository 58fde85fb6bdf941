//! Shared domain types and the seeded sampling primitives every analysis
//! builds on.
//!
//! All types are immutable once constructed. Constructors validate, so any
//! `FeatureMatrix` or `PredictionSet` in hand satisfies its invariants.

use std::collections::{BTreeMap, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::Algorithm;
use crate::error::{Error, Result};

/// Deterministic RNG for `(seed, stream)`.
///
/// Distinct streams from the same seed are statistically independent, which
/// lets batch `b` or tree `t` own its randomness regardless of evaluation
/// order or thread count.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for the `index`-th independent unit of work (a batch, a
/// repetition) under `seed`, via one SplitMix64 step.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Checks the `FeatureMatrix` invariants on raw parts.
pub fn validate(
    feature_names: &[String],
    rows: &[Vec<f64>],
    sample_ids: Option<&[String]>,
    labels: Option<&[u8]>,
) -> Result<()> {
    if feature_names.is_empty() {
        return Err(Error::Schema("matrix must have at least one feature".into()));
    }
    if rows.is_empty() {
        return Err(Error::Schema("matrix must have at least one row".into()));
    }
    let mut seen = HashSet::with_capacity(feature_names.len());
    for name in feature_names {
        if !seen.insert(name.as_str()) {
            return Err(Error::Schema(format!("duplicate feature name '{name}'")));
        }
    }
    let d = feature_names.len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Schema(format!(
                "row {i} has {} entries, expected {d}",
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Value {
                    row: i,
                    column: feature_names[j].clone(),
                    reason: format!("non-finite value {v}"),
                });
            }
        }
    }
    if let Some(ids) = sample_ids {
        if ids.len() != rows.len() {
            return Err(Error::Schema(format!(
                "{} sample ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
    }
    if let Some(labels) = labels {
        if labels.len() != rows.len() {
            return Err(Error::Schema(format!(
                "{} labels for {} rows",
                labels.len(),
                rows.len()
            )));
        }
        check_labels(labels)?;
    }
    Ok(())
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&l| l > 1) {
        Some(i) => Err(Error::Value {
            row: i,
            column: "label".into(),
            reason: format!("label {} is not in {{0, 1}}", labels[i]),
        }),
        None => Ok(()),
    }
}

/// An n×d table of embeddings with optional ids and binary labels
/// (0 = normal, 1 = tumor).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    feature_names: Vec<String>,
    data: Vec<f64>,
    n: usize,
    sample_ids: Option<Vec<String>>,
    labels: Option<Vec<u8>>,
}

impl FeatureMatrix {
    pub fn new(
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        sample_ids: Option<Vec<String>>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        validate(
            &feature_names,
            &rows,
            sample_ids.as_deref(),
            labels.as_deref(),
        )?;
        let n = rows.len();
        let data = rows.into_iter().flatten().collect();
        Ok(FeatureMatrix {
            feature_names,
            data,
            n,
            sample_ids,
            labels,
        })
    }

    /// Builds a matrix with generated names `f0..f{d-1}`.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Option<Vec<u8>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let names = (0..d).map(|j| format!("f{j}")).collect();
        Self::new(names, rows, None, labels)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn sample_ids(&self) -> Option<&[String]> {
        self.sample_ids.as_deref()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Rows at `indices`, in that order, carrying ids and labels along.
    /// Indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let d = self.d();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            feature_names: self.feature_names.clone(),
            data,
            n: indices.len(),
            sample_ids: self
                .sample_ids
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i].clone()).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn check_same_width(&self, other: &FeatureMatrix) -> Result<()> {
        if self.d() != other.d() {
            return Err(Error::DimensionMismatch {
                reference: self.d(),
                target: other.d(),
            });
        }
        Ok(())
    }
}

/// Per-sample positive-class (tumor) posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    p_positive: Vec<f64>,
    labels: Option<Vec<u8>>,
    sample_ids: Option<Vec<String>>,
}

impl PredictionSet {
    pub fn new(
        p_positive: Vec<f64>,
        labels: Option<Vec<u8>>,
        sample_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if let Some(i) = p_positive
            .iter()
            .position(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Value {
                row: i,
                column: "p_positive".into(),
                reason: format!("probability {} is not in [0, 1]", p_positive[i]),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != p_positive.len() {
                return Err(Error::Schema(format!(
                    "{} labels for {} predictions",
                    labels.len(),
                    p_positive.len()
                )));
            }
            check_labels(labels)?;
        }
        if let Some(ids) = &sample_ids {
            if ids.len() != p_positive.len() {
                return Err(Error::Schema(format!(
                    "{} sample ids for {} predictions",
                    ids.len(),
                    p_positive.len()
                )));
            }
        }
        Ok(PredictionSet {
            p_positive,
            labels,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.p_positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_positive.is_empty()
    }

    pub fn p_positive(&self) -> &[f64] {
        &self.p_positive
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn sample_ids(&self) -> Option<&[String]> {
        self.sample_ids.as_deref()
    }

    pub fn select(&self, indices: &[usize]) -> PredictionSet {
        PredictionSet {
            p_positive: indices.iter().map(|&i| self.p_positive[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            sample_ids: self
                .sample_ids
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i].clone()).collect()),
        }
    }
}

/// Row indices for a batch of `n` draws out of `n_total`.
///
/// With `class_ratio = Some(r)` the batch holds exactly `floor(n * r)`
/// positives and the rest negatives, drawn within each class. The returned
/// order is shuffled.
pub fn sample_indices(
    n_total: usize,
    labels: Option<&[u8]>,
    n: usize,
    class_ratio: Option<f64>,
    with_replacement: bool,
    seed: u64,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidBatchSize("batch size must be at least 1".into()));
    }
    if n_total == 0 {
        return Err(Error::InsufficientData("cannot sample from an empty set".into()));
    }
    let mut rng = seeded_rng(seed, 0);
    let mut out = match class_ratio {
        None => draw(&(0..n_total).collect::<Vec<_>>(), n, with_replacement, &mut rng)?,
        Some(ratio) => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::InvalidConfig(format!(
                    "class ratio {ratio} is not in [0, 1]"
                )));
            }
            let labels = labels.ok_or(Error::MissingLabels)?;
            let n_pos = (n as f64 * ratio).floor() as usize;
            let (pos, neg): (Vec<usize>, Vec<usize>) =
                (0..n_total).partition(|&i| labels[i] == 1);
            let mut picked = draw(&pos, n_pos, with_replacement, &mut rng)?;
            picked.extend(draw(&neg, n - n_pos, with_replacement, &mut rng)?);
            picked
        }
    };
    out.shuffle(&mut rng);
    Ok(out)
}

fn draw(pool: &[usize], k: usize, with_replacement: bool, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if with_replacement {
        if pool.is_empty() {
            return Err(Error::InsufficientData(format!(
                "need {k} draws from an empty stratum"
            )));
        }
        Ok((0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    } else {
        if pool.len() < k {
            return Err(Error::InsufficientData(format!(
                "need {k} rows without replacement but stratum has {}",
                pool.len()
            )));
        }
        let mut pool = pool.to_vec();
        let (head, _) = pool.partial_shuffle(rng, k);
        Ok(head.to_vec())
    }
}

/// Draws a batch of rows, optionally stratified by label.
pub fn sample_batch(
    matrix: &FeatureMatrix,
    n: usize,
    class_ratio: Option<f64>,
    with_replacement: bool,
    seed: u64,
) -> Result<FeatureMatrix> {
    let idx = sample_indices(
        matrix.n(),
        matrix.labels(),
        n,
        class_ratio,
        with_replacement,
        seed,
    )?;
    Ok(matrix.select_rows(&idx))
}

/// Disjoint random partition of `0..n`; the first part has
/// `round(fraction * n)` entries, clamped so neither part is empty.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    split_indices_stream(n, fraction, seed, 1)
}

/// `split_indices` on an explicit RNG stream, so independent splits from one
/// seed do not share a permutation.
pub(crate) fn split_indices_stream(
    n: usize,
    fraction: f64,
    seed: u64,
    stream: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    if n < 2 {
        return Err(Error::TooFewSamples(format!("cannot split {n} rows")));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, stream));
    let second = idx.split_off(k);
    Ok((idx, second))
}

pub fn split(
    matrix: &FeatureMatrix,
    fraction: f64,
    seed: u64,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let (a, b) = split_indices(matrix.n(), fraction, seed)?;
    Ok((matrix.select_rows(&a), matrix.select_rows(&b)))
}

/// Per-feature entry of a shift score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub feature: String,
    pub value: f64,
}

/// Result of a distance-based detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftScore {
    pub metric_name: Algorithm,
    pub raw_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Vec<FeatureValue>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTest {
    pub feature: String,
    pub statistic: f64,
    pub p_value: f64,
    pub corrected_p: f64,
    /// More than a quarter of the pooled values are tied, which makes
    /// asymptotic p-values unreliable.
    #[serde(default)]
    pub heavy_ties: bool,
}

/// Outcome of a per-feature hypothesis test battery.
///
/// `p_value` is the smallest corrected p across features and `statistic`
/// is the test statistic of that feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_name: Algorithm,
    pub statistic: f64,
    pub p_value: f64,
    pub per_feature: Vec<FeatureTest>,
    pub alarm: bool,
    pub alpha: f64,
}

/// Mean in-distribution shift score per metric, used to convert raw scores
/// into fold changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineProfile {
    pub values: BTreeMap<Algorithm, f64>,
    /// The individual batch scores behind each mean, in batch order.
    #[serde(default)]
    pub batch_scores: BTreeMap<Algorithm, Vec<f64>>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Smallest value a baseline entry may take.
pub const BASELINE_FLOOR: f64 = 1e-12;

impl BaselineProfile {
    /// Builds a profile from explicit values, flooring each at
    /// [`BASELINE_FLOOR`].
    pub fn from_values(
        values: impl IntoIterator<Item = (Algorithm, f64)>,
        n_batches: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_batches < 2 {
            return Err(Error::InvalidConfig(format!(
                "a baseline needs at least 2 batches, got {n_batches}"
            )));
        }
        let values = values
            .into_iter()
            .map(|(k, v)| (k, floor_baseline(v)))
            .collect();
        Ok(BaselineProfile {
            values,
            batch_scores: BTreeMap::new(),
            n_batches,
            batch_size,
            seed,
        })
    }

    pub fn get(&self, metric: Algorithm) -> Option<f64> {
        self.values.get(&metric).copied()
    }
}

pub(crate) fn floor_baseline(v: f64) -> f64 {
    if v.is_finite() && v > BASELINE_FLOOR {
        v
    } else {
        BASELINE_FLOOR
    }
}

/// Label-free confidence indicators of a target prediction set against a
/// reference, plus AUC deltas when both sides carry labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdiReport {
    pub cdi_m_ref: f64,
    pub cdi_m_target: f64,
    pub delta_cdi_m: f64,
    pub cdi_h_ref: f64,
    pub cdi_h_target: f64,
    pub delta_cdi_h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_auc: Option<f64>,
    pub boundary: f64,
    pub alarm_threshold: f64,
    /// `delta_cdi_m < alarm_threshold`.
    pub alarm: bool,
}

/// Binned distribution of one feature (or of predicted probabilities) for
/// one or more groups on shared edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub selector: String,
    pub bins: usize,
    pub bin_edges: Vec<f64>,
    pub counts_per_group: IndexMap<String, Vec<u64>>,
    pub normalized: bool,
    /// Per-group fractions, present when `normalized` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequencies: Option<IndexMap<String, Vec<f64>>>,
}

//! Distance-based shift scores between a reference and a target sample.
//!
//! Every function here is pure: the same inputs, config and seed give
//! bit-identical output regardless of the rayon pool size. Parallel loops
//! only map; reductions happen sequentially in a fixed order.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::Algorithm;
use crate::error::{Error, Result};
use crate::model::{seeded_rng, FeatureMatrix, FeatureValue, ShiftScore};
use crate::stats;

/// Pair cap for the bandwidth median when no explicit `max_pairs` is given.
pub const DEFAULT_BANDWIDTH_PAIRS: usize = 250_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    #[serde(rename = "median-heuristic")]
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Rule(BandwidthRule::MedianHeuristic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub kernel_bandwidth: Bandwidth,
    pub mahalanobis_shrinkage: f64,
    pub histogram_bins: usize,
    pub smoothing_epsilon: f64,
    /// Cap on the number of kernel evaluations per MMD sum (and per
    /// bandwidth median); larger sums are estimated from a seeded subsample.
    pub max_pairs: Option<usize>,
    /// Standardize both samples with the reference mean and std first.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            kernel_bandwidth: Bandwidth::default(),
            mahalanobis_shrinkage: 0.01,
            histogram_bins: 32,
            smoothing_epsilon: 1e-6,
            max_pairs: None,
            standardize: false,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(b) = self.kernel_bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig(format!("kernel bandwidth must be positive, got {b}")));
            }
        }
        if !(0.0..1.0).contains(&self.mahalanobis_shrinkage) {
            return Err(Error::InvalidConfig(format!(
                "mahalanobis shrinkage must be in [0, 1), got {}",
                self.mahalanobis_shrinkage
            )));
        }
        if self.histogram_bins < 2 {
            return Err(Error::InvalidConfig("histogram_bins must be at least 2".into()));
        }
        if !(self.smoothing_epsilon > 0.0) {
            return Err(Error::InvalidConfig("smoothing_epsilon must be positive".into()));
        }
        if self.max_pairs == Some(0) {
            return Err(Error::InvalidConfig("max_pairs must be at least 1".into()));
        }
        Ok(())
    }
}

fn prepared<'a>(
    reference: &'a FeatureMatrix,
    target: &'a FeatureMatrix,
    config: &MetricConfig,
) -> Result<(Cow<'a, FeatureMatrix>, Cow<'a, FeatureMatrix>)> {
    reference.check_same_width(target)?;
    config.validate()?;
    if !config.standardize {
        return Ok((Cow::Borrowed(reference), Cow::Borrowed(target)));
    }
    let d = reference.d();
    let (mu, sd): (Vec<f64>, Vec<f64>) = (0..d)
        .map(|j| {
            let col = reference.column(j);
            let s = stats::sample_std(&col);
            (stats::mean(&col), if s > 0.0 { s } else { 1.0 })
        })
        .unzip();
    let rescale = |m: &FeatureMatrix| -> Result<FeatureMatrix> {
        let rows = m
            .rows()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect())
            .collect();
        FeatureMatrix::new(
            m.feature_names().to_vec(),
            rows,
            m.sample_ids().map(<[String]>::to_vec),
            m.labels().map(<[u8]>::to_vec),
        )
    };
    Ok((Cow::Owned(rescale(reference)?), Cow::Owned(rescale(target)?)))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Orders two samples canonically so symmetric statistics are computed
/// along the same floating-point path whichever way round they arrive.
fn canonical<'a>(a: &'a FeatureMatrix, b: &'a FeatureMatrix) -> (&'a FeatureMatrix, &'a FeatureMatrix) {
    use std::cmp::Ordering;
    let ord = a.n().cmp(&b.n()).then_with(|| {
        a.rows()
            .flatten()
            .zip(b.rows().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    if ord == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

/// Median pairwise Euclidean distance over the pooled sample.
///
/// At most `max_pairs` (default [`DEFAULT_BANDWIDTH_PAIRS`]) distinct pairs
/// are used; beyond that a seeded subsample is taken. Returns 1.0 when the
/// median is zero.
pub fn median_heuristic_bandwidth(
    reference: &FeatureMatrix,
    target: &FeatureMatrix,
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<f64> {
    reference.check_same_width(target)?;
    let (a, b) = canonical(reference, target);
    let pooled: Vec<&[f64]> = a.rows().chain(b.rows()).collect();
    let n = pooled.len();
    if n < 2 {
        return Err(Error::TooFewSamples("bandwidth needs at least 2 points".into()));
    }
    let total = n * (n - 1) / 2;
    let cap = max_pairs.unwrap_or(DEFAULT_BANDWIDTH_PAIRS);
    let mut dists: Vec<f64> = if total <= cap {
        (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let pooled = &pooled;
                (i + 1..n).map(move |j| sq_dist(pooled[i], pooled[j]).sqrt())
            })
            .collect()
    } else {
        let mut rng = seeded_rng(seed, 0x6d6d64);
        (0..cap)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                sq_dist(pooled[i], pooled[j]).sqrt()
            })
            .collect()
    };
    let m = dists.len();
    dists.sort_by(f64::total_cmp);
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Draws a uniform pair from `0..n x 0..m` that `keep` accepts. Gives up
/// after a bounded number of rejections.
fn draw_pair(rng: &mut impl Rng, n: usize, m: usize, distinct: bool, keep: impl Fn(usize, usize) -> bool) -> Option<(usize, usize)> {
    for _ in 0..1000 {
        let i = rng.random_range(0..n);
        let j = if distinct {
            let j = rng.random_range(0..m - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        } else {
            rng.random_range(0..m)
        };
        if keep(i, j) {
            return Some((i, j));
        }
    }
    None
}

fn kernel_mean(sum: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::TooFewSamples("no kernel pairs left to average".into()));
    }
    Ok(sum / count as f64)
}

/// Mean kernel value over `i != j` pairs within one sample. With `source`,
/// pairs of copies of the same original row are skipped.
fn within_mean(x: &FeatureMatrix, gamma: f64, cap: Option<usize>, rng_stream: u64, seed: u64, source: Option<&[usize]>) -> Result<f64> {
    let n = x.n();
    let keep = |i: usize, j: usize| source.is_none_or(|s| s[i] != s[j]);
    match cap {
        Some(cap) if n * (n - 1) > cap => {
            let mut rng = seeded_rng(seed, rng_stream);
            let mut sum = 0.0;
            let mut count = 0;
            for _ in 0..cap {
                let Some((i, j)) = draw_pair(&mut rng, n, n, true, keep) else { break };
                sum += (-gamma * sq_dist(x.row(i), x.row(j))).exp();
                count += 1;
            }
            kernel_mean(sum, count)
        }
        _ => {
            let rows: Vec<(f64, usize)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let xi = x.row(i);
                    let mut s = 0.0;
                    let mut c = 0;
                    for j in (i + 1..n).filter(|&j| keep(i, j)) {
                        s += (-gamma * sq_dist(xi, x.row(j))).exp();
                        c += 1;
                    }
                    (s, c)
                })
                .collect();
            let sum: f64 = rows.iter().map(|r| r.0).sum();
            let count: usize = rows.iter().map(|r| r.1).sum();
            kernel_mean(sum, count)
        }
    }
}

/// Mean kernel value over all `(x_i, y_j)` pairs. With `y_source`, pairs
/// where `y_j` is a copy of `x_i` are skipped.
fn cross_mean(x: &FeatureMatrix, y: &FeatureMatrix, gamma: f64, cap: Option<usize>, seed: u64, y_source: Option<&[usize]>) -> Result<f64> {
    let keep = |i: usize, j: usize| y_source.is_none_or(|s| s[j] != i);
    match cap {
        Some(cap) if x.n() * y.n() > cap => {
            let mut rng = seeded_rng(seed, 3);
            let mut sum = 0.0;
            let mut count = 0;
            for _ in 0..cap {
                let Some((i, j)) = draw_pair(&mut rng, x.n(), y.n(), false, keep) else { break };
                sum += (-gamma * sq_dist(x.row(i), y.row(j))).exp();
                count += 1;
            }
            kernel_mean(sum, count)
        }
        _ => {
            let rows: Vec<(f64, usize)> = (0..x.n())
                .into_par_iter()
                .map(|i| {
                    let xi = x.row(i);
                    let mut s = 0.0;
                    let mut c = 0;
                    for (_, yj) in y.rows().enumerate().filter(|&(j, _)| keep(i, j)) {
                        s += (-gamma * sq_dist(xi, yj)).exp();
                        c += 1;
                    }
                    (s, c)
                })
                .collect();
            let sum: f64 = rows.iter().map(|r| r.0).sum();
            let count: usize = rows.iter().map(|r| r.1).sum();
            kernel_mean(sum, count)
        }
    }
}

fn bandwidth(r: &FeatureMatrix, t: &FeatureMatrix, config: &MetricConfig) -> Result<f64> {
    match config.kernel_bandwidth {
        Bandwidth::Fixed(s) => Ok(s),
        Bandwidth::Rule(BandwidthRule::MedianHeuristic) => median_heuristic_bandwidth(r, t, config.max_pairs, config.seed),
    }
}

fn mmd_score(estimate: f64) -> ShiftScore {
    ShiftScore {
        metric_name: Algorithm::Mmd,
        raw_value: estimate.max(0.0),
        fold_value: None,
        detail: None,
    }
}

/// Unbiased squared MMD with an RBF kernel `exp(-|x-y|^2 / (2 sigma^2))`,
/// clamped at zero.
pub fn mmd_squared(reference: &FeatureMatrix, target: &FeatureMatrix, config: &MetricConfig) -> Result<ShiftScore> {
    let (r, t) = prepared(reference, target, config)?;
    if r.n() < 2 || t.n() < 2 {
        return Err(Error::TooFewSamples("MMD needs at least 2 samples per side".into()));
    }
    let gamma = 1.0 / (2.0 * bandwidth(&r, &t, config)?.powi(2));
    let (a, b) = canonical(&r, &t);
    let kaa = within_mean(a, gamma, config.max_pairs, 1, config.seed, None)?;
    let kbb = within_mean(b, gamma, config.max_pairs, 2, config.seed, None)?;
    let kab = cross_mean(a, b, gamma, config.max_pairs, config.seed, None)?;
    Ok(mmd_score(kaa + kbb - 2.0 * kab))
}

/// Squared MMD of a resample of `reference` (rows `source`) against
/// `reference` itself.
///
/// Kernel pairs between copies of one original row are left out. They would
/// otherwise bias the estimate below zero, and the clamp would report 0 for
/// every resampled batch.
pub fn mmd_squared_resampled(reference: &FeatureMatrix, source: &[usize], config: &MetricConfig) -> Result<ShiftScore> {
    let batch = reference.select_rows(source);
    let (r, t) = prepared(reference, &batch, config)?;
    if r.n() < 2 || t.n() < 2 {
        return Err(Error::TooFewSamples("MMD needs at least 2 samples per side".into()));
    }
    let gamma = 1.0 / (2.0 * bandwidth(&r, &t, config)?.powi(2));
    let kaa = within_mean(&r, gamma, config.max_pairs, 1, config.seed, None)?;
    let kbb = within_mean(&t, gamma, config.max_pairs, 2, config.seed, Some(source))?;
    let kab = cross_mean(&r, &t, gamma, config.max_pairs, config.seed, Some(source))?;
    Ok(mmd_score(kaa + kbb - 2.0 * kab))
}

/// Wasserstein-1 distance between two 1-D empirical distributions, as the
/// integral of the absolute ECDF difference.
pub fn wasserstein_1d(x: &[f64], y: &[f64]) -> f64 {
    let xs = stats::sorted(x);
    let ys = stats::sorted(y);
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut area = 0.0;
    let mut prev: Option<f64> = None;
    let mut gap = 0.0;
    while i < xs.len() || j < ys.len() {
        let z = match (xs.get(i), ys.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            area += gap * (z - p);
        }
        while i < xs.len() && xs[i] == z {
            i += 1;
        }
        while j < ys.len() && ys[j] == z {
            j += 1;
        }
        gap = (i as f64 / nx - j as f64 / ny).abs();
        prev = Some(z);
    }
    area
}

fn per_feature<F>(r: &FeatureMatrix, t: &FeatureMatrix, f: F) -> Vec<FeatureValue>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    (0..r.d())
        .into_par_iter()
        .map(|j| FeatureValue {
            feature: r.feature_names()[j].clone(),
            value: f(&r.column(j), &t.column(j)),
        })
        .collect()
}

fn averaged(metric: Algorithm, detail: Vec<FeatureValue>) -> ShiftScore {
    let raw = detail.iter().map(|f| f.value).sum::<f64>() / detail.len() as f64;
    ShiftScore {
        metric_name: metric,
        raw_value: raw.max(0.0),
        fold_value: None,
        detail: Some(detail),
    }
}

/// Mean over features of the marginal Wasserstein-1 distances.
pub fn wasserstein_mean(reference: &FeatureMatrix, target: &FeatureMatrix, config: &MetricConfig) -> Result<ShiftScore> {
    let (r, t) = prepared(reference, target, config)?;
    Ok(averaged(Algorithm::Wasserstein, per_feature(&r, &t, wasserstein_1d)))
}

/// Mean Mahalanobis distance of target samples to the reference
/// distribution, with covariance shrunk toward a scaled identity:
/// `(1 - lambda) S + lambda * mean(diag S) * I`.
pub fn mahalanobis_mean(reference: &FeatureMatrix, target: &FeatureMatrix, config: &MetricConfig) -> Result<ShiftScore> {
    let (r, t) = prepared(reference, target, config)?;
    let n = r.n();
    if n < 2 {
        return Err(Error::TooFewSamples("Mahalanobis needs at least 2 reference samples".into()));
    }
    let d = r.d();
    let mu: Vec<f64> = (0..d).map(|j| stats::mean(&r.column(j))).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in r.rows() {
        let c = DVector::from_iterator(d, row.iter().zip(&mu).map(|(x, m)| x - m));
        cov.syger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    let lambda = config.mahalanobis_shrinkage;
    if lambda > 0.0 {
        let diag_mean = cov.trace() / d as f64;
        cov *= 1.0 - lambda;
        for k in 0..d {
            cov[(k, k)] += lambda * diag_mean;
        }
    }
    // syger only fills the lower triangle
    cov.fill_upper_triangle_with_lower_triangle();
    let chol = cov.cholesky().ok_or(Error::SingularCovariance)?;
    let l = chol.l();
    let dists: Vec<f64> = t
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|row| {
            let c = DVector::from_iterator(d, row.iter().zip(&mu).map(|(x, m)| x - m));
            let z = l.solve_lower_triangular(&c).expect("cholesky factor is nonsingular");
            z.norm_squared().sqrt()
        })
        .collect();
    Ok(ShiftScore {
        metric_name: Algorithm::Mahalanobis,
        raw_value: dists.iter().sum::<f64>() / dists.len() as f64,
        fold_value: None,
        detail: None,
    })
}

/// `k` equal-mass bins over the reference range `[min, max]`, plus an
/// underflow and an overflow bin so values outside it stay distinguishable.
struct ReferenceBins {
    lo: f64,
    hi: f64,
    interior: Vec<f64>,
}

impl ReferenceBins {
    fn new(reference: &[f64], k: usize) -> Self {
        let sorted = stats::sorted(reference);
        ReferenceBins {
            lo: sorted[0],
            hi: sorted[sorted.len() - 1],
            interior: stats::quantile_edges(reference, k),
        }
    }

    fn index(&self, x: f64) -> usize {
        if x < self.lo {
            0
        } else if x > self.hi {
            self.interior.len() + 2
        } else {
            1 + stats::bin_of(&self.interior, x)
        }
    }

    /// Smoothed bin probabilities of `values`.
    fn smoothed(&self, values: &[f64], epsilon: f64) -> Vec<f64> {
        let mut counts = vec![0u64; self.interior.len() + 3];
        for &v in values {
            counts[self.index(v)] += 1;
        }
        let n = values.len() as f64;
        let raw: Vec<f64> = counts.iter().map(|&c| c as f64 / n + epsilon).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Jensen-Shannon divergence in bits; lies in [0, 1].
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let half = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    // average the two orderings so js(p, q) == js(q, p) bit for bit
    let js = 0.5 * half(p, &m) + 0.5 * half(q, &m);
    js.clamp(0.0, 1.0)
}

fn histogram_divergence(
    metric: Algorithm,
    reference: &FeatureMatrix,
    target: &FeatureMatrix,
    config: &MetricConfig,
    f: fn(&[f64], &[f64]) -> f64,
) -> Result<ShiftScore> {
    let (r, t) = prepared(reference, target, config)?;
    let k = config.histogram_bins;
    let eps = config.smoothing_epsilon;
    let detail = per_feature(&r, &t, |x, y| {
        let bins = ReferenceBins::new(x, k);
        f(&bins.smoothed(x, eps), &bins.smoothed(y, eps))
    });
    Ok(averaged(metric, detail))
}

/// `KL(reference || target)` per feature on reference quantile bins, in nats.
pub fn kl_histogram(reference: &FeatureMatrix, target: &FeatureMatrix, config: &MetricConfig) -> Result<ShiftScore> {
    histogram_divergence(Algorithm::Kl, reference, target, config, kl_divergence)
}

/// Base-2 Jensen-Shannon divergence per feature on reference quantile bins.
pub fn js_histogram(reference: &FeatureMatrix, target: &FeatureMatrix, config: &MetricConfig) -> Result<ShiftScore> {
    histogram_divergence(Algorithm::Js, reference, target, config, js_divergence)
}

/// Dispatches a distance metric by id.
pub fn run_metric(metric: Algorithm, reference: &FeatureMatrix, target: &FeatureMatrix, config: &MetricConfig) -> Result<ShiftScore> {
    match metric {
        Algorithm::Mmd => mmd_squared(reference, target, config),
        Algorithm::Wasserstein => wasserstein_mean(reference, target, config),
        Algorithm::Mahalanobis => mahalanobis_mean(reference, target, config),
        Algorithm::Kl => kl_histogram(reference, target, config),
        Algorithm::Js => js_histogram(reference, target, config),
        other => Err(Error::UnknownMetric(other.id().to_string())),
    }
}

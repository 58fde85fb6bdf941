//! Per-feature two-sample hypothesis tests with multiple-testing correction.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::algorithms::Algorithm;
use crate::error::{Error, Result};
use crate::model::{seeded_rng, FeatureMatrix, FeatureTest, TestResult};
use crate::stats;

/// Pooled sizes up to this use the exact permutation distribution of U.
pub const RANK_SUM_EXACT_MAX: usize = 40;

/// Tie fraction above which the asymptotic p-values are flagged.
pub const HEAVY_TIE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    Bonferroni,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub alpha: f64,
    pub correction: Correction,
    pub cvm_permutations: usize,
    pub chi2_bins: usize,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            alpha: 0.05,
            correction: Correction::Bonferroni,
            cvm_permutations: 999,
            chi2_bins: 10,
            seed: 0,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.cvm_permutations < 99 {
            return Err(Error::InvalidConfig("cvm_permutations must be at least 99".into()));
        }
        if self.chi2_bins < 2 {
            return Err(Error::InvalidConfig("chi2_bins must be at least 2".into()));
        }
        Ok(())
    }
}

fn nonempty(x: &[f64], y: &[f64]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        Err(Error::EmptySample)
    } else {
        Ok(())
    }
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // small-lambda form of the CDF converges fast here
        let pi = std::f64::consts::PI;
        let k = -pi * pi / (8.0 * lambda * lambda);
        let cdf: f64 = (1..=20)
            .map(|j| {
                let o = (2 * j - 1) as f64;
                (o * o * k).exp()
            })
            .sum::<f64>()
            * (2.0 * pi).sqrt()
            / lambda;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let sf: f64 = (1..=100)
            .map(|j| {
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp()
            })
            .sum::<f64>()
            * 2.0;
        sf.clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov-Smirnov test. Returns `(D, p)` with the asymptotic
/// p-value at effective size `nm / (n + m)`.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    nonempty(x, y)?;
    let xs = stats::sorted(x);
    let ys = stats::sorted(y);
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let z = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] == z {
            i += 1;
        }
        while j < ys.len() && ys[j] == z {
            j += 1;
        }
        d = d.max((i as f64 / nx - j as f64 / ny).abs());
    }
    // once one side is exhausted the gap only shrinks toward 0, except for
    // the remaining step itself
    d = d.max((i as f64 / nx - j as f64 / ny).abs());
    let n_eff = nx * ny / (nx + ny);
    Ok((d, kolmogorov_sf(n_eff.sqrt() * d)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSumOutcome {
    /// Mann-Whitney U counting pairs with `y > x` (ties count one half).
    pub u: f64,
    /// Normal-approximation z with tie and continuity corrections.
    pub z: f64,
    pub p: f64,
    /// Whether `p` came from the exact permutation distribution.
    pub exact: bool,
}

/// Wilcoxon rank-sum / Mann-Whitney U test, two-sided.
///
/// For pooled sizes up to [`RANK_SUM_EXACT_MAX`] the p-value is exact under
/// the permutation distribution of the observed midranks; above that it
/// uses the normal approximation with tie-corrected variance and continuity
/// correction. All-equal pooled values give `p = 1`.
pub fn rank_sum(x: &[f64], y: &[f64]) -> Result<RankSumOutcome> {
    nonempty(x, y)?;
    let (nx, ny) = (x.len(), y.len());
    let n = nx + ny;
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = stats::midranks(&pooled);
    // doubled ranks are integers, which keeps everything below exact
    let r2: Vec<u64> = ranks.iter().map(|r| (2.0 * r) as u64).collect();
    let sum_y2: u64 = r2[nx..].iter().sum();
    let u2 = sum_y2 as i64 - (ny * (ny + 1)) as i64;
    let u = u2 as f64 / 2.0;

    let mean = (nx * ny) as f64 / 2.0;
    let ties: f64 = stats::tie_groups(&stats::sorted(&pooled))
        .into_iter()
        .map(|t| (t * t * t - t) as f64)
        .sum();
    let (nf, nxf, nyf) = (n as f64, nx as f64, ny as f64);
    let var = if n > 1 {
        nxf * nyf / 12.0 * ((nf + 1.0) - ties / (nf * (nf - 1.0)))
    } else {
        0.0
    };
    if var <= 0.0 {
        return Ok(RankSumOutcome { u, z: 0.0, p: 1.0, exact: false });
    }
    let dev = u - mean;
    let z = if dev.abs() <= 0.5 {
        0.0
    } else {
        (dev.abs() - 0.5).copysign(dev) / var.sqrt()
    };

    if n <= RANK_SUM_EXACT_MAX {
        let p = exact_rank_sum_p(&r2, ny, u2, (nx * ny) as i64);
        return Ok(RankSumOutcome { u, z, p, exact: true });
    }
    let p = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(RankSumOutcome { u, z, p, exact: false })
}

/// Two-sided exact p: the share of size-`ny` subsets of the doubled ranks
/// whose doubled U lies at least as far from its mean as the observed one.
fn exact_rank_sum_p(r2: &[u64], ny: usize, u2_obs: i64, mean2: i64) -> f64 {
    let max_sum: u64 = r2.iter().sum();
    let width = max_sum as usize + 1;
    // dp[k][s]: subsets of size k with doubled rank sum s
    let mut dp = vec![vec![0u64; width]; ny + 1];
    dp[0][0] = 1;
    for &r in r2 {
        let r = r as usize;
        for k in (1..=ny).rev() {
            let (lo, hi) = dp.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let offset = (ny * (ny + 1)) as i64;
    let obs_dev = (u2_obs - mean2).abs();
    let mut extreme = 0u64;
    let mut total = 0u64;
    for (s, &c) in dp[ny].iter().enumerate() {
        if c == 0 {
            continue;
        }
        total += c;
        if (s as i64 - offset - mean2).abs() >= obs_dev {
            extreme += c;
        }
    }
    extreme as f64 / total as f64
}

/// Two-sample Cramer-von Mises statistic
/// `T = nm / (n+m)^2 * sum over pooled points of (F_x - F_y)^2`.
pub fn cvm_statistic(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    let mut order = pooled;
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values: Vec<f64> = order.iter().map(|p| p.0).collect();
    let groups = stats::tie_groups(&values);
    let is_x: Vec<bool> = order.iter().map(|p| p.1).collect();
    cvm_from_sorted(&groups, &is_x, x.len(), y.len())
}

fn cvm_from_sorted(groups: &[usize], is_x: &[bool], nx: usize, ny: usize) -> f64 {
    let (fx, fy) = (nx as f64, ny as f64);
    let mut pos = 0;
    let (mut cx, mut cy) = (0usize, 0usize);
    let mut sum = 0.0;
    for &g in groups {
        for &b in &is_x[pos..pos + g] {
            if b {
                cx += 1;
            } else {
                cy += 1;
            }
        }
        pos += g;
        let diff = cx as f64 / fx - cy as f64 / fy;
        sum += g as f64 * diff * diff;
    }
    fx * fy / ((fx + fy) * (fx + fy)) * sum
}

/// Cramer-von Mises test with a seeded permutation p-value
/// `(1 + #{T_perm >= T_obs}) / (B + 1)`.
pub fn cvm_two_sample(x: &[f64], y: &[f64], config: &TestConfig) -> Result<(f64, f64)> {
    cvm_with_stream(x, y, config, 0)
}

fn cvm_with_stream(x: &[f64], y: &[f64], config: &TestConfig, stream: u64) -> Result<(f64, f64)> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::EmptySample);
    }
    let mut order: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values: Vec<f64> = order.iter().map(|p| p.0).collect();
    let groups = stats::tie_groups(&values);
    let mut labels: Vec<bool> = order.iter().map(|p| p.1).collect();
    let t_obs = cvm_from_sorted(&groups, &labels, x.len(), y.len());
    let threshold = t_obs - 1e-12 * t_obs.abs();
    let mut rng = seeded_rng(config.seed, 0x0063_766d_0000_0000 | stream);
    let b = config.cvm_permutations;
    let mut hits = 0usize;
    for _ in 0..b {
        labels.shuffle(&mut rng);
        if cvm_from_sorted(&groups, &labels, x.len(), y.len()) >= threshold {
            hits += 1;
        }
    }
    Ok((t_obs, (1 + hits) as f64 / (b + 1) as f64))
}

/// Chi-squared test of homogeneity on quantile bins of the reference `x`.
/// Bins with no pooled mass are merged away before counting degrees of
/// freedom.
pub fn chi2_binned(x: &[f64], y: &[f64], config: &TestConfig) -> Result<(f64, f64)> {
    nonempty(x, y)?;
    let edges = stats::quantile_edges(x, config.chi2_bins);
    let cx = stats::bin_counts(&edges, x);
    let cy = stats::bin_counts(&edges, y);
    let cells: Vec<(f64, f64)> = cx
        .iter()
        .zip(&cy)
        .filter(|(a, b)| **a + **b > 0)
        .map(|(&a, &b)| (a as f64, b as f64))
        .collect();
    if cells.len() < 2 {
        return Err(Error::DegenerateBinning);
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let total = nx + ny;
    let mut stat = 0.0;
    for &(a, b) in &cells {
        let col = a + b;
        let ex = nx * col / total;
        let ey = ny * col / total;
        stat += (a - ex) * (a - ex) / ex + (b - ey) * (b - ey) / ey;
    }
    let dof = (cells.len() - 1) as f64;
    let dist = ChiSquared::new(dof).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let p = if stat <= 0.0 { 1.0 } else { dist.sf(stat).clamp(0.0, 1.0) };
    Ok((stat, p))
}

fn single(test: Algorithm, x: &[f64], y: &[f64], config: &TestConfig, stream: u64) -> Result<(f64, f64)> {
    match test {
        Algorithm::Ks => ks_two_sample(x, y),
        Algorithm::RankSum => rank_sum(x, y).map(|o| (o.u, o.p)),
        Algorithm::Cvm => cvm_with_stream(x, y, config, stream),
        Algorithm::Chi2 => chi2_binned(x, y, config),
        other => Err(Error::UnknownMetric(other.id().to_string())),
    }
}

/// Runs `test` on every feature marginal and aggregates an alarm.
pub fn per_feature_suite(reference: &FeatureMatrix, target: &FeatureMatrix, test: Algorithm, config: &TestConfig) -> Result<TestResult> {
    reference.check_same_width(target)?;
    config.validate()?;
    if !matches!(test, Algorithm::Ks | Algorithm::RankSum | Algorithm::Cvm | Algorithm::Chi2) {
        return Err(Error::UnknownMetric(test.id().to_string()));
    }
    let d = reference.d();
    let names = reference.feature_names();
    let outcomes: Vec<Result<FeatureTest>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let x = reference.column(j);
            let y = target.column(j);
            let (statistic, p) = single(test, &x, &y, config, j as u64).map_err(|e| e.in_feature(&names[j]))?;
            let corrected = match config.correction {
                Correction::Bonferroni => (p * d as f64).min(1.0),
                Correction::None => p,
            };
            let pooled: Vec<f64> = x.iter().chain(&y).copied().collect();
            Ok(FeatureTest {
                feature: names[j].clone(),
                statistic,
                p_value: p,
                corrected_p: corrected,
                heavy_ties: stats::tied_fraction(&stats::sorted(&pooled)) > HEAVY_TIE_FRACTION,
            })
        })
        .collect();
    let per_feature = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let best = per_feature
        .iter()
        .min_by(|a, b| a.corrected_p.total_cmp(&b.corrected_p))
        .expect("at least one feature");
    Ok(TestResult {
        test_name: test,
        statistic: best.statistic,
        p_value: best.corrected_p,
        alarm: best.corrected_p < config.alpha,
        alpha: config.alpha,
        per_feature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_basics() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(ks_two_sample(&x, &x).unwrap(), (0.0, 1.0));
        let (d, p) = ks_two_sample(&[1.0, 2.0], &[5.0, 6.0, 7.0]).unwrap();
        assert_eq!(d, 1.0);
        assert!(p < 0.2);
        assert!(matches!(ks_two_sample(&[], &x), Err(Error::EmptySample)));
    }

    #[test]
    fn ks_interleaved_matches_ecdf_enumeration() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.5, 2.5, 3.5, 4.5, 5.5];
        let ecdf = |s: &[f64], z: f64| s.iter().filter(|&&v| v <= z).count() as f64 / s.len() as f64;
        let d = x
            .iter()
            .chain(&y)
            .map(|&z| (ecdf(&x, z) - ecdf(&y, z)).abs())
            .fold(0.0, f64::max);
        assert_eq!(ks_two_sample(&x, &y).unwrap().0, d);
        assert!((d - 0.2).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_tail_matches_series_regions() {
        // both branches agree near the switch point
        let a = kolmogorov_sf(1.179_999);
        let b = kolmogorov_sf(1.18);
        assert!((a - b).abs() < 1e-6);
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 5e-4);
    }

    #[test]
    fn rank_sum_extremes() {
        let r = rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(r.u, 12.0);
        let x = [1.0, 2.0, 2.0, 5.0];
        let r = rank_sum(&x, &x).unwrap();
        assert_eq!(r.u, 8.0);
        assert_eq!(r.p, 1.0);
        let r = rank_sum(&[3.0, 3.0], &[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn rank_sum_small_exact() {
        let r = rank_sum(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 4.0);
        assert!(r.exact);
        assert!((r.p - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn rank_sum_large_uses_normal() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..30).map(|i| i as f64 + 10.5).collect();
        let r = rank_sum(&x, &y).unwrap();
        assert!(!r.exact);
        assert!(r.p > 0.0 && r.p < 0.01);
    }

    #[test]
    fn cvm_bounds_and_separation() {
        let cfg = TestConfig::default();
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..20).map(|i| 100.0 + i as f64).collect();
        let (t, p) = cvm_two_sample(&x, &y, &cfg).unwrap();
        assert!(t > 0.0);
        assert_eq!(p, 1.0 / 1000.0);
        let (t0, p0) = cvm_two_sample(&x, &x, &cfg).unwrap();
        assert_eq!(t0, 0.0);
        assert_eq!(p0, 1.0);
        assert_eq!(cvm_two_sample(&x, &y, &cfg).unwrap(), (t, p));
    }

    #[test]
    fn cvm_matches_rank_formula_without_ties() {
        let x = [0.3, 1.2, 2.2, 4.1];
        let y = [0.9, 1.7, 3.3];
        let (n, m) = (4.0, 3.0);
        let pooled = [0.3, 0.9, 1.2, 1.7, 2.2, 3.3, 4.1];
        let rank = |v: f64| pooled.iter().position(|&p| p == v).unwrap() as f64 + 1.0;
        let ux: f64 = x.iter().enumerate().map(|(i, &v)| (rank(v) - (i as f64 + 1.0)).powi(2)).sum();
        let uy: f64 = y.iter().enumerate().map(|(i, &v)| (rank(v) - (i as f64 + 1.0)).powi(2)).sum();
        let u = n * ux + m * uy;
        let expect = u / (n * m * (n + m)) - (4.0 * m * n - 1.0) / (6.0 * (m + n));
        assert!((cvm_statistic(&x, &y) - expect).abs() < 1e-12);
    }

    #[test]
    fn chi2_cases() {
        let cfg = TestConfig::default();
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(chi2_binned(&x, &x, &cfg).unwrap(), (0.0, 1.0));
        let y: Vec<f64> = (0..50).map(|i| 100.0 + i as f64).collect();
        let (stat, p) = chi2_binned(&x, &y, &cfg).unwrap();
        // 10 bins of 5 reference values each; all 50 target values in the top
        // bin: stat over 10 columns computed by hand is 90.9...
        let mut expect = 0.0;
        for b in 0..10 {
            let (a, t): (f64, f64) = (5.0, if b == 9 { 50.0 } else { 0.0 });
            let col = a + t;
            expect += (a - col / 2.0).powi(2) / (col / 2.0) + (t - col / 2.0).powi(2) / (col / 2.0);
        }
        assert!((stat - expect).abs() < 1e-9);
        assert!(p < 0.001);
        let two = TestConfig { chi2_bins: 2, ..cfg.clone() };
        let z = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(chi2_binned(&z, &[0.0, 1.0], &two).unwrap().0, 0.0);
        assert!(matches!(chi2_binned(&[1.0, 1.0], &[1.0], &cfg), Err(Error::DegenerateBinning)));
    }

    #[test]
    fn suite_on_identical_data() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| (0..5).map(|j| ((i * 7 + j * 3) % 11) as f64 + i as f64 * 0.01).collect()).collect();
        let m = FeatureMatrix::from_rows(rows, None).unwrap();
        for t in [Algorithm::Ks, Algorithm::RankSum, Algorithm::Cvm, Algorithm::Chi2] {
            let r = per_feature_suite(&m, &m, t, &TestConfig::default()).unwrap();
            assert!(!r.alarm, "{t}");
            assert_eq!(r.per_feature.len(), 5);
            for f in &r.per_feature {
                assert!(f.corrected_p >= f.p_value);
                assert!(f.p_value > 0.9, "{t} {}", f.p_value);
            }
        }
        assert!(per_feature_suite(&m, &m, Algorithm::Mmd, &TestConfig::default()).is_err());
    }
}

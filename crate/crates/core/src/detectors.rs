//! Learned detectors: classifier two-sample tests (logistic regression and
//! random forest), a domain classifier, and a linear autoencoder.
//!
//! Every detector pools the reference (domain 0) and target (domain 1),
//! splits each side with its own seeded stream, and scores on the held-out
//! part only. Randomness is derived from `DetectorConfig::seed`, so results
//! do not depend on the rayon pool size.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::Algorithm;
use crate::cdi::roc_auc;
use crate::error::{Error, Result};
use crate::model::{seeded_rng, split_indices_stream, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            iterations: 500,
            learning_rate: 0.1,
            l2_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubsample {
    Sqrt,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subsample: FeatureSubsample,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            max_depth: 8,
            min_leaf: 5,
            feature_subsample: FeatureSubsample::Sqrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub variance_target: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig { variance_target: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub test_fraction: f64,
    pub logistic: LogisticConfig,
    pub forest: ForestConfig,
    pub autoencoder: AutoencoderConfig,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            test_fraction: 0.5,
            logistic: LogisticConfig::default(),
            forest: ForestConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)");
        }
        if self.logistic.iterations == 0 {
            return bad("logistic.iterations must be at least 1");
        }
        if !(self.logistic.learning_rate > 0.0) || !(self.logistic.l2_lambda >= 0.0) {
            return bad("logistic.learning_rate must be positive and l2_lambda nonnegative");
        }
        if self.forest.trees == 0 || self.forest.max_depth == 0 || self.forest.min_leaf == 0 {
            return bad("forest.trees, max_depth and min_leaf must be at least 1");
        }
        let v = self.autoencoder.variance_target;
        if !(v > 0.0 && v <= 1.0) {
            return bad("autoencoder.variance_target must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorResult {
    pub detector_name: Algorithm,
    /// AUC for the C2ST detectors, accuracy for the domain classifier,
    /// error ratio for the autoencoder.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_value: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Pooled, standardized train/test partition with domain labels
/// (reference = 0, target = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<u8>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<u8>,
}

/// Splits each domain separately (stratified by domain), then standardizes
/// every feature with statistics from the training part only.
pub fn domain_split(reference: &FeatureMatrix, target: &FeatureMatrix, config: &DetectorConfig) -> Result<DomainSplit> {
    reference.check_same_width(target)?;
    config.validate()?;
    if reference.n() < 4 || target.n() < 4 {
        return Err(Error::TooFewSamples("classifier tests need at least 4 samples per domain".into()));
    }
    let train_fraction = 1.0 - config.test_fraction;
    let (r_train, r_test) = split_indices_stream(reference.n(), train_fraction, config.seed, 10)?;
    let (t_train, t_test) = split_indices_stream(target.n(), train_fraction, config.seed, 11)?;
    let gather = |m: &FeatureMatrix, idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| m.row(i).to_vec()).collect() };
    let mut train_x = gather(reference, &r_train);
    train_x.extend(gather(target, &t_train));
    let mut test_x = gather(reference, &r_test);
    test_x.extend(gather(target, &t_test));
    let train_y = domain_labels(r_train.len(), t_train.len());
    let test_y = domain_labels(r_test.len(), t_test.len());

    let d = reference.d();
    let n = train_x.len() as f64;
    for j in 0..d {
        let mean = train_x.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = train_x.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for row in train_x.iter_mut().chain(test_x.iter_mut()) {
            row[j] = (row[j] - mean) / sd;
        }
    }
    Ok(DomainSplit {
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

fn domain_labels(n_ref: usize, n_tgt: usize) -> Vec<u8> {
    std::iter::repeat_n(0u8, n_ref).chain(std::iter::repeat_n(1u8, n_tgt)).collect()
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// `sigmoid(z) - y`, written so that `(z, y) -> (-z, 1 - y)` negates it
/// bit for bit.
fn residual(z: f64, y: u8) -> f64 {
    if y == 1 {
        -sigmoid(-z)
    } else {
        sigmoid(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    /// Full-batch gradient descent from zero weights on mean cross-entropy
    /// plus `l2_lambda / 2 * |w|^2` (bias unpenalized).
    pub fn fit(x: &[Vec<f64>], y: &[u8], config: &LogisticConfig) -> LogisticModel {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut grad = vec![0.0; d];
        for _ in 0..config.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for (row, &label) in x.iter().zip(y) {
                let r = residual(decision(&w, b, row), label);
                for (g, v) in grad.iter_mut().zip(row) {
                    *g += r * v;
                }
                grad_b += r;
            }
            for (wj, g) in w.iter_mut().zip(&grad) {
                *wj -= config.learning_rate * (g / n + config.l2_lambda * *wj);
            }
            b -= config.learning_rate * (grad_b / n);
        }
        LogisticModel { weights: w, bias: b }
    }

    /// Logit of the positive class.
    pub fn decision(&self, row: &[f64]) -> f64 {
        decision(&self.weights, self.bias, row)
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        sigmoid(self.decision(row))
    }
}

fn decision(w: &[f64], b: f64, row: &[f64]) -> f64 {
    let mut z = b;
    for (wj, v) in w.iter().zip(row) {
        z += wj * v;
    }
    z
}

/// Held-out AUC and accuracy of one logistic model trained on the domain
/// split, so both detectors can share a single fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticScores {
    pub auc: f64,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

pub fn logistic_domain_scores(reference: &FeatureMatrix, target: &FeatureMatrix, config: &DetectorConfig) -> Result<LogisticScores> {
    let split = domain_split(reference, target, config)?;
    let model = LogisticModel::fit(&split.train_x, &split.train_y, &config.logistic);
    let scores: Vec<f64> = split.test_x.iter().map(|r| model.decision(r)).collect();
    let auc = roc_auc(&scores, &split.test_y)?;
    let correct = scores
        .iter()
        .zip(&split.test_y)
        .filter(|(s, &y)| u8::from(**s > 0.0) == y)
        .count();
    Ok(LogisticScores {
        auc,
        accuracy: correct as f64 / scores.len() as f64,
        n_train: split.train_y.len(),
        n_test: split.test_y.len(),
    })
}

/// C2ST with a logistic classifier; score is the held-out AUC.
pub fn c2st_logistic(reference: &FeatureMatrix, target: &FeatureMatrix, config: &DetectorConfig) -> Result<DetectorResult> {
    let s = logistic_domain_scores(reference, target, config)?;
    Ok(result(Algorithm::C2stLogistic, s.auc, s.n_train, s.n_test, config.seed))
}

/// Logistic domain classifier; score is held-out accuracy at threshold 0.5.
pub fn domain_classifier_accuracy(reference: &FeatureMatrix, target: &FeatureMatrix, config: &DetectorConfig) -> Result<DetectorResult> {
    let s = logistic_domain_scores(reference, target, config)?;
    Ok(result(Algorithm::DomainClassifier, s.accuracy, s.n_train, s.n_test, config.seed))
}

fn result(name: Algorithm, score: f64, n_train: usize, n_test: usize, seed: u64) -> DetectorResult {
    DetectorResult {
        detector_name: name,
        score,
        fold_value: None,
        n_train,
        n_test,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A CART classification tree with Gini splits, stored as an arena.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    /// Fits on the rows `sample` (repeats allowed) with per-node feature
    /// subsampling drawn from `rng`.
    pub fn fit<R: Rng>(x: &[Vec<f64>], y: &[u8], sample: &[usize], config: &ForestConfig, rng: &mut R) -> DecisionTree {
        let d = x.first().map_or(0, Vec::len);
        let mtry = match config.feature_subsample {
            FeatureSubsample::Sqrt => ((d as f64).sqrt().ceil() as usize).clamp(1, d.max(1)),
            FeatureSubsample::All => d,
        };
        let mut tree = DecisionTree { nodes: Vec::new() };
        let mut idx = sample.to_vec();
        tree.grow(x, y, &mut idx, 0, mtry, config, rng);
        tree
    }

    #[allow(clippy::too_many_arguments)]
    fn grow<R: Rng>(
        &mut self,
        x: &[Vec<f64>],
        y: &[u8],
        idx: &mut [usize],
        depth: usize,
        mtry: usize,
        config: &ForestConfig,
        rng: &mut R,
    ) -> usize {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| y[i] == 1).count();
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(pos as f64 / n as f64));
        if depth >= config.max_depth || pos == 0 || pos == n || n < 2 * config.min_leaf {
            return slot;
        }
        let d = x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        let (chosen, _) = features.partial_shuffle(rng, mtry);
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in chosen.iter() {
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
            let mut left_pos = 0usize;
            for k in 1..n {
                left_pos += usize::from(y[idx[k - 1]] == 1);
                if k < config.min_leaf || n - k < config.min_leaf {
                    continue;
                }
                let (lo, hi) = (x[idx[k - 1]][f], x[idx[k]][f]);
                if lo == hi {
                    continue;
                }
                let impurity = weighted_gini(left_pos, k) + weighted_gini(pos - left_pos, n - k);
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    best = Some((impurity, f, 0.5 * (lo + hi)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return slot;
        };
        let mid = partition(idx, |i| x[i][feature] <= threshold);
        let (left_idx, right_idx) = idx.split_at_mut(mid);
        let left = self.grow(x, y, left_idx, depth + 1, mtry, config, rng);
        let right = self.grow(x, y, right_idx, depth + 1, mtry, config, rng);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }

    /// Fraction of positives in the leaf reached by `row`.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(p) => return p,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// `n * gini` of a node with `pos` positives among `n`.
fn weighted_gini(pos: usize, n: usize) -> f64 {
    let p = pos as f64 / n as f64;
    n as f64 * 2.0 * p * (1.0 - p)
}

/// Stable in-place partition; returns the number of elements satisfying `pred`.
fn partition(idx: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let (mut yes, no): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| pred(i));
    let mid = yes.len();
    yes.extend(no);
    idx.copy_from_slice(&yes);
    mid
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Tree `t` draws its bootstrap and feature subsets from the stream for
    /// `seed + t`, so the forest is identical for any thread count.
    pub fn fit(x: &[Vec<f64>], y: &[u8], config: &ForestConfig, seed: u64) -> RandomForest {
        let n = x.len();
        let trees = (0..config.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = seeded_rng(seed.wrapping_add(t as u64), 0x7265_6573);
                let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                DecisionTree::fit(x, y, &sample, config, &mut rng)
            })
            .collect();
        RandomForest { trees }
    }

    /// Mean of the per-tree leaf probabilities.
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }
}

/// C2ST with a random forest; score is the held-out AUC of the mean vote.
pub fn c2st_random_forest(reference: &FeatureMatrix, target: &FeatureMatrix, config: &DetectorConfig) -> Result<DetectorResult> {
    let split = domain_split(reference, target, config)?;
    let forest = RandomForest::fit(&split.train_x, &split.train_y, &config.forest, config.seed);
    let scores: Vec<f64> = split.test_x.par_iter().map(|r| forest.predict(r)).collect();
    let auc = roc_auc(&scores, &split.test_y)?;
    Ok(result(Algorithm::C2stRf, auc, split.train_y.len(), split.test_y.len(), config.seed))
}

/// Linear autoencoder: projection onto the top principal components of the
/// data it was fitted on.
#[derive(Debug, Clone)]
pub struct LinearAutoencoder {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    explained: Vec<f64>,
}

/// Floor on the holdout reconstruction error used as the score denominator.
pub const RECONSTRUCTION_FLOOR: f64 = 1e-12;

impl LinearAutoencoder {
    fn eigen(rows: &[&[f64]]) -> (DVector<f64>, Vec<(f64, DVector<f64>)>) {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean = DVector::from_iterator(d, (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n));
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in rows {
            let c = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(x, m)| x - m));
            cov.syger(1.0, &c, &c, 1.0);
        }
        cov.fill_upper_triangle_with_lower_triangle();
        cov /= (rows.len().max(2) - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut pairs: Vec<(f64, DVector<f64>)> = eig
            .eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(&v, c)| (v.max(0.0), c.into_owned()))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        (mean, pairs)
    }

    fn from_pairs(mean: DVector<f64>, pairs: &[(f64, DVector<f64>)], k: usize) -> Self {
        let d = mean.len();
        let cols: Vec<DVector<f64>> = pairs[..k].iter().map(|p| p.1.clone()).collect();
        let basis = if cols.is_empty() {
            DMatrix::zeros(d, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        LinearAutoencoder {
            mean,
            basis,
            explained: pairs.iter().map(|p| p.0).collect(),
        }
    }

    /// Keeps the fewest components whose eigenvalues reach
    /// `variance_target` of the total variance.
    pub fn fit(rows: &[&[f64]], variance_target: f64) -> Self {
        let (mean, pairs) = Self::eigen(rows);
        let total: f64 = pairs.iter().map(|p| p.0).sum();
        let mut k = 0;
        if total > 0.0 {
            let goal = variance_target * total * (1.0 - 1e-12);
            let mut acc = 0.0;
            for (i, p) in pairs.iter().enumerate() {
                acc += p.0;
                k = i + 1;
                if acc >= goal {
                    break;
                }
            }
        }
        Self::from_pairs(mean, &pairs, k)
    }

    pub fn fit_components(rows: &[&[f64]], k: usize) -> Self {
        let (mean, pairs) = Self::eigen(rows);
        Self::from_pairs(mean, &pairs, k.min(pairs.len()))
    }

    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    /// Eigenvalues of the fitted covariance, descending.
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained
    }

    /// Mean over rows of the per-coordinate squared reconstruction error.
    pub fn reconstruction_error(&self, rows: &[&[f64]]) -> f64 {
        let d = self.mean.len();
        let errs: Vec<f64> = rows
            .par_iter()
            .map(|r| {
                let c = DVector::from_iterator(d, r.iter().zip(self.mean.iter()).map(|(x, m)| x - m));
                let code = self.basis.tr_mul(&c);
                let back = &self.basis * code;
                (c - back).norm_squared() / d as f64
            })
            .collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

/// Ratio of target reconstruction error to reference-holdout error for a
/// PCA autoencoder fitted on half of the reference.
pub fn autoencoder_score(reference: &FeatureMatrix, target: &FeatureMatrix, config: &DetectorConfig) -> Result<DetectorResult> {
    reference.check_same_width(target)?;
    config.validate()?;
    if reference.n() < 4 {
        return Err(Error::TooFewSamples("autoencoder needs at least 4 reference samples".into()));
    }
    let (fit_idx, hold_idx) = split_indices_stream(reference.n(), 0.5, config.seed, 12)?;
    let fit_rows: Vec<&[f64]> = fit_idx.iter().map(|&i| reference.row(i)).collect();
    let hold_rows: Vec<&[f64]> = hold_idx.iter().map(|&i| reference.row(i)).collect();
    let ae = LinearAutoencoder::fit(&fit_rows, config.autoencoder.variance_target);
    let target_rows: Vec<&[f64]> = target.rows().collect();
    let holdout = ae.reconstruction_error(&hold_rows).max(RECONSTRUCTION_FLOOR);
    let ratio = ae.reconstruction_error(&target_rows) / holdout;
    Ok(result(Algorithm::Autoencoder, ratio, fit_rows.len(), target_rows.len(), config.seed))
}

/// Dispatches a learned detector by id.
pub fn run_detector(detector: Algorithm, reference: &FeatureMatrix, target: &FeatureMatrix, config: &DetectorConfig) -> Result<DetectorResult> {
    match detector {
        Algorithm::C2stLogistic => c2st_logistic(reference, target, config),
        Algorithm::C2stRf => c2st_random_forest(reference, target, config),
        Algorithm::DomainClassifier => domain_classifier_accuracy(reference, target, config),
        Algorithm::Autoencoder => autoencoder_score(reference, target, config),
        other => Err(Error::UnknownMetric(other.id().to_string())),
    }
}

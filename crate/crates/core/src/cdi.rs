//! Confidence-based degradation indicators and AUC.
//!
//! Both indicators are label-free summaries of how far a set of binary
//! posteriors sits from the decision boundary. A drop relative to the
//! reference signals that predictions are collapsing toward the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CdiReport, PredictionSet};
use crate::stats::midranks;

/// Alarm when the margin indicator drops by more than this.
pub const DEFAULT_ALARM_THRESHOLD: f64 = -0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdiConfig {
    pub boundary: f64,
    pub alarm_threshold: f64,
}

impl Default for CdiConfig {
    fn default() -> Self {
        CdiConfig {
            boundary: 0.5,
            alarm_threshold: DEFAULT_ALARM_THRESHOLD,
        }
    }
}

impl CdiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.boundary > 0.0 && self.boundary < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "boundary must be in (0, 1), got {}",
                self.boundary
            )));
        }
        if !self.alarm_threshold.is_finite() {
            return Err(Error::InvalidConfig("alarm_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdiKind {
    Margin,
    Entropy,
}

/// Twice the mean distance of the posteriors from the boundary.
pub fn cdi_margin(preds: &PredictionSet, config: &CdiConfig) -> Result<f64> {
    config.validate()?;
    margin_of(preds.p_positive(), config.boundary)
}

fn margin_of(p: &[f64], boundary: f64) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let total: f64 = p.iter().map(|&v| (v - boundary).abs()).sum();
    Ok(2.0 * total / p.len() as f64)
}

/// Binary Shannon entropy in bits, with `0 * log 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// One minus the mean binary entropy of the posteriors.
pub fn cdi_entropy(preds: &PredictionSet) -> Result<f64> {
    let p = preds.p_positive();
    if p.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let h: f64 = p.iter().map(|&v| binary_entropy(v)).sum();
    Ok(1.0 - h / p.len() as f64)
}

pub fn cdi(preds: &PredictionSet, kind: CdiKind, config: &CdiConfig) -> Result<f64> {
    match kind {
        CdiKind::Margin => cdi_margin(preds, config),
        CdiKind::Entropy => cdi_entropy(preds),
    }
}

/// Target indicator minus reference indicator.
pub fn delta_cdi(target: &PredictionSet, reference: &PredictionSet, kind: CdiKind, config: &CdiConfig) -> Result<f64> {
    Ok(cdi(target, kind, config)? - cdi(reference, kind, config)?)
}

/// Area under the ROC curve for arbitrary scores (ties count one half).
///
/// Computed from midranks as `U / (P * N)`. The numerator is an exact
/// multiple of one half, so the result equals pair counting bit for bit.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    match (n_pos, n_neg) {
        (0, 0) => return Err(Error::EmptyPredictions),
        (0, _) => return Err(Error::SingleClass(0)),
        (_, 0) => return Err(Error::SingleClass(1)),
        _ => {}
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let p = n_pos as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n_neg as f64))
}

pub fn auc(preds: &PredictionSet) -> Result<f64> {
    let labels = preds.labels().ok_or(Error::MissingLabels)?;
    roc_auc(preds.p_positive(), labels)
}

pub fn delta_auc(target: &PredictionSet, reference: &PredictionSet) -> Result<f64> {
    Ok(auc(target)? - auc(reference)?)
}

/// Both indicators on both sides, with AUC fields when both sets are labeled.
pub fn cdi_report(reference: &PredictionSet, target: &PredictionSet, config: &CdiConfig) -> Result<CdiReport> {
    let cdi_m_ref = cdi_margin(reference, config)?;
    let cdi_m_target = cdi_margin(target, config)?;
    let cdi_h_ref = cdi_entropy(reference)?;
    let cdi_h_target = cdi_entropy(target)?;
    let (auc_ref, auc_target, delta_auc) = if reference.labels().is_some() && target.labels().is_some() {
        let a = auc(reference)?;
        let b = auc(target)?;
        (Some(a), Some(b), Some(b - a))
    } else {
        (None, None, None)
    };
    let delta_cdi_m = cdi_m_target - cdi_m_ref;
    Ok(CdiReport {
        cdi_m_ref,
        cdi_m_target,
        delta_cdi_m,
        cdi_h_ref,
        cdi_h_target,
        delta_cdi_h: cdi_h_target - cdi_h_ref,
        auc_ref,
        auc_target,
        delta_auc,
        boundary: config.boundary,
        alarm_threshold: config.alarm_threshold,
        alarm: delta_cdi_m < config.alarm_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preds(p: &[f64]) -> PredictionSet {
        PredictionSet::new(p.to_vec(), None, None).unwrap()
    }

    fn labeled(p: &[f64], y: &[u8]) -> PredictionSet {
        PredictionSet::new(p.to_vec(), Some(y.to_vec()), None).unwrap()
    }

    #[test]
    fn margin_examples() {
        let c = CdiConfig::default();
        assert_eq!(cdi_margin(&preds(&[0.5, 0.5]), &c).unwrap(), 0.0);
        assert_eq!(cdi_margin(&preds(&[0.0, 1.0, 1.0]), &c).unwrap(), 1.0);
        assert!((cdi_margin(&preds(&[0.9, 0.1, 0.8, 0.2]), &c).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(cdi_margin(&preds(&[]), &c), Err(Error::EmptyPredictions)));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(cdi_entropy(&preds(&[0.5])).unwrap(), 0.0);
        assert_eq!(cdi_entropy(&preds(&[0.0, 1.0])).unwrap(), 1.0);
        let v = cdi_entropy(&preds(&[0.25])).unwrap();
        assert!((v - 0.188_721_875_540_867).abs() < 1e-12, "{v}");
    }

    #[test]
    fn delta_examples() {
        let c = CdiConfig::default();
        let r = preds(&[0.05, 0.95, 0.05, 0.95]);
        let t = preds(&[0.5; 4]);
        assert!((delta_cdi(&t, &r, CdiKind::Margin, &c).unwrap() + 0.9).abs() < 1e-15);
        assert_eq!(delta_cdi(&r, &r, CdiKind::Entropy, &c).unwrap(), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&labeled(&[0.9, 0.4, 0.6, 0.3], &[1, 1, 0, 0])).unwrap(), 0.75);
        assert_eq!(auc(&labeled(&[0.3; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auc(&labeled(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert!(matches!(auc(&preds(&[0.1])), Err(Error::MissingLabels)));
        assert!(matches!(auc(&labeled(&[0.1, 0.2], &[1, 1])), Err(Error::SingleClass(1))));
    }

    #[test]
    fn report_fields() {
        let c = CdiConfig::default();
        let r = labeled(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0]);
        let t = labeled(&[0.6, 0.5, 0.4, 0.5], &[1, 0, 1, 0]);
        let rep = cdi_report(&r, &t, &c).unwrap();
        assert_eq!(rep.delta_cdi_m, rep.cdi_m_target - rep.cdi_m_ref);
        assert!(rep.alarm);
        assert!(rep.delta_auc.unwrap() < 0.0);
        let unl = cdi_report(&preds(&[0.9]), &t, &c).unwrap();
        assert!(unl.auc_ref.is_none() && unl.delta_auc.is_none());
        let same = cdi_report(&r, &r, &c).unwrap();
        assert_eq!((same.delta_cdi_m, same.delta_cdi_h, same.delta_auc), (0.0, 0.0, Some(0.0)));
    }

    proptest! {
        #[test]
        fn symmetric_under_complement(p in proptest::collection::vec(0.0..=1.0f64, 1..40)) {
            let c = CdiConfig::default();
            let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
            let (a, b) = (preds(&p), preds(&q));
            prop_assert!((cdi_margin(&a, &c).unwrap() - cdi_margin(&b, &c).unwrap()).abs() < 1e-12);
            prop_assert!((cdi_entropy(&a).unwrap() - cdi_entropy(&b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn bounded(p in proptest::collection::vec(0.0..=1.0f64, 1..40)) {
            let c = CdiConfig::default();
            let m = cdi_margin(&preds(&p), &c).unwrap();
            let h = cdi_entropy(&preds(&p)).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!((0.0..=1.0 + 1e-15).contains(&h) && h >= -1e-15);
        }

        #[test]
        fn moving_toward_boundary_decreases_both(
            p in proptest::collection::vec(0.0..=1.0f64, 1..20),
            which in any::<proptest::sample::Index>(),
            frac in 0.05..0.95f64,
        ) {
            let c = CdiConfig::default();
            let i = which.index(p.len());
            prop_assume!((p[i] - 0.5).abs() > 1e-3);
            let mut q = p.clone();
            q[i] = 0.5 + (p[i] - 0.5) * frac;
            prop_assert!(cdi_margin(&preds(&q), &c).unwrap() < cdi_margin(&preds(&p), &c).unwrap());
            prop_assert!(cdi_entropy(&preds(&q)).unwrap() < cdi_entropy(&preds(&p)).unwrap());
        }

        #[test]
        fn auc_invariant_under_increasing_map(
            s in proptest::collection::vec(-20i32..20, 2..30),
            y in proptest::collection::vec(0u8..=1, 2..30),
        ) {
            let n = s.len().min(y.len());
            let (s, y) = (&s[..n], &y[..n]);
            prop_assume!(y.contains(&0) && y.contains(&1));
            let a: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = s.iter().map(|&v| (v as f64).powi(3) + 7.0 * v as f64).collect();
            prop_assert_eq!(roc_auc(&a, y).unwrap(), roc_auc(&b, y).unwrap());
        }
    }
}

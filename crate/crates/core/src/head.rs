//! A simulated zero-shot classification head and synthetic shift scenarios.
//!
//! The head mimics a vision-language model's inference step: the embedding
//! and two class prototypes are L2-normalized, the scaled cosines are the
//! logits, and a two-way softmax gives the posteriors.
//!
//! Scenario geometry (before any shift): coordinate 0 carries the class
//! signal at `±class_separation / 2`, coordinate 1 holds a common offset
//! shared by both classes, and every coordinate gets isotropic noise.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{seeded_rng, FeatureMatrix, PredictionSet};

/// Conventional CLIP-style logit scale.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotHead {
    /// `[normal, tumor]`, unit length.
    class_prototypes: [Vec<f64>; 2],
    logit_scale: f64,
}

impl ZeroShotHead {
    pub fn new(normal: &[f64], tumor: &[f64], logit_scale: f64) -> Result<Self> {
        if normal.len() != tumor.len() {
            return Err(Error::DimensionMismatch {
                reference: normal.len(),
                target: tumor.len(),
            });
        }
        if !(logit_scale > 0.0) || !logit_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "logit scale must be positive, got {logit_scale}"
            )));
        }
        Ok(ZeroShotHead {
            class_prototypes: [l2_normalize(normal)?, l2_normalize(tumor)?],
            logit_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.class_prototypes[0].len()
    }

    pub fn normal_prototype(&self) -> &[f64] {
        &self.class_prototypes[0]
    }

    pub fn tumor_prototype(&self) -> &[f64] {
        &self.class_prototypes[1]
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    /// The same head with the class prototypes exchanged.
    pub fn swapped(&self) -> Self {
        let [a, b] = self.class_prototypes.clone();
        ZeroShotHead {
            class_prototypes: [b, a],
            logit_scale: self.logit_scale,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(p_tumor, p_normal)` for one embedding.
pub fn zero_shot_posteriors(embedding: &[f64], head: &ZeroShotHead) -> Result<(f64, f64)> {
    if embedding.len() != head.dim() {
        return Err(Error::DimensionMismatch {
            reference: head.dim(),
            target: embedding.len(),
        });
    }
    let z = l2_normalize(embedding)?;
    let s_normal = head.logit_scale * dot(&z, head.normal_prototype());
    let s_tumor = head.logit_scale * dot(&z, head.tumor_prototype());
    let p_tumor = 1.0 / (1.0 + (s_normal - s_tumor).exp());
    let p_normal = 1.0 / (1.0 + (s_tumor - s_normal).exp());
    Ok((p_tumor, p_normal))
}

/// Tumor posteriors for every row of `features`, carrying over ids and labels.
pub fn predict(features: &FeatureMatrix, head: &ZeroShotHead) -> Result<PredictionSet> {
    let p = features
        .rows()
        .map(|r| zero_shot_posteriors(r, head).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(
        p,
        features.labels().map(<[u8]>::to_vec),
        features.sample_ids().map(<[String]>::to_vec),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Id,
    #[serde(alias = "benign")]
    BenignShift,
    #[serde(alias = "harmful")]
    HarmfulShift,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "id" => Ok(ScenarioKind::Id),
            "benign" | "benign_shift" => Ok(ScenarioKind::BenignShift),
            "harmful" | "harmful_shift" => Ok(ScenarioKind::HarmfulShift),
            _ => Err(Error::InvalidConfig(format!(
                "unknown scenario kind '{s}' (expected id, benign or harmful)"
            ))),
        }
    }
}

/// Default translation for the benign scenario.
pub const DEFAULT_BENIGN_MAGNITUDE: f64 = 5.0;
/// Default contraction for the harmful scenario (separation 3 becomes 0.5).
pub const DEFAULT_HARMFUL_MAGNITUDE: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n: usize,
    pub d: usize,
    pub class_separation: f64,
    /// `None` picks the per-kind default.
    pub shift_magnitude: Option<f64>,
    pub noise_std: f64,
    pub common_offset: f64,
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::Id,
            n: 4000,
            d: 16,
            class_separation: 3.0,
            shift_magnitude: None,
            noise_std: 1.0,
            common_offset: 12.0,
            logit_scale: DEFAULT_LOGIT_SCALE,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn magnitude(&self) -> f64 {
        self.shift_magnitude.unwrap_or(match self.kind {
            ScenarioKind::Id => 0.0,
            ScenarioKind::BenignShift => DEFAULT_BENIGN_MAGNITUDE,
            ScenarioKind::HarmfulShift => DEFAULT_HARMFUL_MAGNITUDE,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n < 2 || self.n % 2 != 0 {
            return bad(format!("n must be even and at least 2, got {}", self.n));
        }
        if self.d < 2 {
            return bad(format!("d must be at least 2, got {}", self.d));
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return bad("class_separation must be positive".into());
        }
        let m = self.magnitude();
        if !(m >= 0.0) || !m.is_finite() {
            return bad("shift_magnitude must be nonnegative".into());
        }
        if self.kind == ScenarioKind::HarmfulShift && m > self.class_separation {
            return bad(format!(
                "harmful shift_magnitude {m} exceeds class_separation {}",
                self.class_separation
            ));
        }
        if !(self.noise_std > 0.0) || !self.common_offset.is_finite() {
            return bad("noise_std must be positive and common_offset finite".into());
        }
        if !(self.logit_scale > 0.0) {
            return bad("logit_scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub features: FeatureMatrix,
    pub predictions: PredictionSet,
    pub head: ZeroShotHead,
}

/// Draws a labeled scenario. The unshifted draw depends only on the seed and
/// geometry, so all three kinds share it and differ by a post-transform.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let (n, d) = (config.n, config.d);
    let half = config.class_separation / 2.0;
    let mut rng = seeded_rng(config.seed, 0);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let m = config.magnitude();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let mut row: Vec<f64> = (0..d).map(|_| noise.sample(&mut rng)).collect();
            row[0] += sign * half;
            row[1] += config.common_offset;
            match config.kind {
                ScenarioKind::Id => {}
                ScenarioKind::BenignShift => row[1] -= m,
                ScenarioKind::HarmfulShift => row[0] -= sign * m / 2.0,
            }
            row
        })
        .collect();

    let mut tumor = vec![0.0; d];
    tumor[0] = half;
    tumor[1] = config.common_offset;
    let mut normal = tumor.clone();
    normal[0] = -half;
    let head = ZeroShotHead::new(&normal, &tumor, config.logit_scale)?;

    let names = (0..d).map(|j| format!("f{j}")).collect();
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let features = FeatureMatrix::new(names, rows, Some(ids), Some(labels))?;
    let predictions = predict(&features, &head)?;
    Ok(Scenario {
        features,
        predictions,
        head,
    })
}

//! Identifiers and catalog of every detector the toolkit ships.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Distance,
    Statistic,
    Ml,
    /// Output-side confidence indicators.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mmd,
    Wasserstein,
    Mahalanobis,
    Js,
    Kl,
    Ks,
    RankSum,
    Cvm,
    Chi2,
    DomainClassifier,
    C2stLogistic,
    C2stRf,
    Autoencoder,
    CdiM,
    CdiH,
}

impl Algorithm {
    pub const ALL: [Algorithm; 15] = [
        Algorithm::Mmd,
        Algorithm::Wasserstein,
        Algorithm::Mahalanobis,
        Algorithm::Js,
        Algorithm::Kl,
        Algorithm::Ks,
        Algorithm::RankSum,
        Algorithm::Cvm,
        Algorithm::Chi2,
        Algorithm::DomainClassifier,
        Algorithm::C2stLogistic,
        Algorithm::C2stRf,
        Algorithm::Autoencoder,
        Algorithm::CdiM,
        Algorithm::CdiH,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Mmd => "mmd",
            Algorithm::Wasserstein => "wasserstein",
            Algorithm::Mahalanobis => "mahalanobis",
            Algorithm::Js => "js",
            Algorithm::Kl => "kl",
            Algorithm::Ks => "ks",
            Algorithm::RankSum => "rank_sum",
            Algorithm::Cvm => "cvm",
            Algorithm::Chi2 => "chi2",
            Algorithm::DomainClassifier => "domain_classifier",
            Algorithm::C2stLogistic => "c2st_logistic",
            Algorithm::C2stRf => "c2st_rf",
            Algorithm::Autoencoder => "autoencoder",
            Algorithm::CdiM => "cdi_m",
            Algorithm::CdiH => "cdi_h",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Algorithm::Mmd => "Maximum Mean Discrepancy",
            Algorithm::Wasserstein => "Wasserstein Distance",
            Algorithm::Mahalanobis => "Mahalanobis Distance",
            Algorithm::Js => "Jensen-Shannon Divergence",
            Algorithm::Kl => "Kullback-Leibler Divergence",
            Algorithm::Ks => "Kolmogorov-Smirnov test",
            Algorithm::RankSum => "Wilcoxon rank-sum test",
            Algorithm::Cvm => "Cramer-von Mises test",
            Algorithm::Chi2 => "Chi-squared test",
            Algorithm::DomainClassifier => "Domain Classifier",
            Algorithm::C2stLogistic => "C2ST (Logistic Classifier)",
            Algorithm::C2stRf => "C2ST (Random Forest)",
            Algorithm::Autoencoder => "Autoencoder",
            Algorithm::CdiM => "Margin-based CDI",
            Algorithm::CdiH => "Entropy-based CDI",
        }
    }

    pub fn category(self) -> Category {
        use Algorithm::*;
        match self {
            Mmd | Wasserstein | Mahalanobis | Js | Kl => Category::Distance,
            Ks | RankSum | Cvm | Chi2 => Category::Statistic,
            DomainClassifier | C2stLogistic | C2stRf | Autoencoder => Category::Ml,
            CdiM | CdiH => Category::Output,
        }
    }

    /// Whether the algorithm yields a single score that can be folded
    /// against a baseline.
    pub fn is_scalar_shift(self) -> bool {
        matches!(self.category(), Category::Distance | Category::Ml)
    }

    pub fn valid_ids() -> String {
        Algorithm::ALL
            .iter()
            .map(|a| a.id())
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Parses a comma-separated id list, skipping empty entries.
    pub fn parse_list(s: &str) -> Result<Vec<Algorithm>, Error> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }

    fn config_section(self) -> &'static str {
        match self.category() {
            Category::Distance => "metric",
            Category::Statistic => "test",
            Category::Ml => "detector",
            Category::Output => "cdi",
        }
    }

    fn parameters(self) -> Value {
        use Algorithm::*;
        match self {
            Mmd => json!([
                {"name": "kernel_bandwidth", "type": "bandwidth", "default": "median-heuristic",
                 "description": "RBF bandwidth: \"median-heuristic\" or a positive number"},
                {"name": "max_pairs", "type": "integer", "default": null, "min": 1, "nullable": true,
                 "description": "cap on kernel pairs evaluated per sum (seeded subsample)"}
            ]),
            Wasserstein => json!([]),
            Mahalanobis => json!([
                {"name": "mahalanobis_shrinkage", "type": "number", "default": 0.01, "min": 0.0, "max_exclusive": 1.0}
            ]),
            Js | Kl => json!([
                {"name": "histogram_bins", "type": "integer", "default": 32, "min": 2},
                {"name": "smoothing_epsilon", "type": "number", "default": 1e-6, "min_exclusive": 0.0}
            ]),
            Ks | RankSum => json!([
                {"name": "alpha", "type": "number", "default": 0.05, "min_exclusive": 0.0, "max_exclusive": 1.0},
                {"name": "correction", "type": "enum", "values": ["bonferroni", "none"], "default": "bonferroni"}
            ]),
            Cvm => json!([
                {"name": "alpha", "type": "number", "default": 0.05, "min_exclusive": 0.0, "max_exclusive": 1.0},
                {"name": "correction", "type": "enum", "values": ["bonferroni", "none"], "default": "bonferroni"},
                {"name": "cvm_permutations", "type": "integer", "default": 999, "min": 99}
            ]),
            Chi2 => json!([
                {"name": "alpha", "type": "number", "default": 0.05, "min_exclusive": 0.0, "max_exclusive": 1.0},
                {"name": "correction", "type": "enum", "values": ["bonferroni", "none"], "default": "bonferroni"},
                {"name": "chi2_bins", "type": "integer", "default": 10, "min": 2}
            ]),
            DomainClassifier | C2stLogistic => json!([
                {"name": "test_fraction", "type": "number", "default": 0.5, "min_exclusive": 0.0, "max_exclusive": 1.0},
                {"name": "logistic.iterations", "type": "integer", "default": 500, "min": 1},
                {"name": "logistic.learning_rate", "type": "number", "default": 0.1, "min_exclusive": 0.0},
                {"name": "logistic.l2_lambda", "type": "number", "default": 1e-3, "min": 0.0}
            ]),
            C2stRf => json!([
                {"name": "test_fraction", "type": "number", "default": 0.5, "min_exclusive": 0.0, "max_exclusive": 1.0},
                {"name": "forest.trees", "type": "integer", "default": 100, "min": 1},
                {"name": "forest.max_depth", "type": "integer", "default": 8, "min": 1},
                {"name": "forest.min_leaf", "type": "integer", "default": 5, "min": 1},
                {"name": "forest.feature_subsample", "type": "enum", "values": ["sqrt", "all"], "default": "sqrt"}
            ]),
            Autoencoder => json!([
                {"name": "autoencoder.variance_target", "type": "number", "default": 0.95, "min_exclusive": 0.0, "max": 1.0}
            ]),
            CdiM => json!([
                {"name": "boundary", "type": "number", "default": 0.5, "min_exclusive": 0.0, "max_exclusive": 1.0},
                {"name": "alarm_threshold", "type": "number", "default": -0.02}
            ]),
            CdiH => json!([]),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.id() == key)
            .ok_or_else(|| Error::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: Algorithm,
    pub name: String,
    pub category: Category,
    /// Section of the analysis config that holds this algorithm's parameters.
    pub config_section: String,
    pub parameters: Value,
}

pub fn catalog() -> Vec<CatalogEntry> {
    Algorithm::ALL
        .iter()
        .map(|&a| CatalogEntry {
            id: a,
            name: a.display_name().to_string(),
            category: a.category(),
            config_section: a.config_section().to_string(),
            parameters: a.parameters(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.id().parse::<Algorithm>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.id()));
        }
        assert_eq!("C2ST-Logistic".parse::<Algorithm>().unwrap(), Algorithm::C2stLogistic);
    }

    #[test]
    fn unknown_id_lists_valid_ones() {
        let msg = "nope".parse::<Algorithm>().unwrap_err().to_string();
        assert!(msg.contains("mmd") && msg.contains("c2st_rf"), "{msg}");
    }

    #[test]
    fn catalog_groups() {
        let cat = catalog();
        let count = |c| cat.iter().filter(|e| e.category == c).count();
        assert_eq!(count(Category::Distance), 5);
        assert_eq!(count(Category::Statistic), 4);
        assert_eq!(count(Category::Ml), 4);
        assert_eq!(count(Category::Output), 2);
    }
}

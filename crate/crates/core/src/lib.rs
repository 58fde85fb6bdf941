//! Domain shift analysis for embedding datasets and classifier outputs.
//!
//! Input shift is measured on feature matrices with distance metrics,
//! per-feature hypothesis tests and learned detectors, each optionally
//! folded against an in-distribution baseline. Output-side degradation is
//! tracked with label-free confidence indicators on prediction sets.

pub mod algorithms;
pub mod baseline;
pub mod cdi;
pub mod detectors;
pub mod error;
pub mod head;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod stat_tests;
mod stats;

pub use algorithms::{Algorithm, Category};
pub use error::{Error, Result};
pub use model::{BaselineProfile, CdiReport, FeatureMatrix, HistogramSummary, PredictionSet, ShiftScore, TestResult};
pub use pipeline::{AnalysisConfig, BatchedStudyReport, ShiftReport};

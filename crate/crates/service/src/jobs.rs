//! Asynchronous analysis jobs and their persistent registry.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use domainsat_core::baseline::{build_baseline, DEFAULT_BATCHES};
use domainsat_core::cdi::cdi_report;
use domainsat_core::ingest::Report;
use domainsat_core::pipeline::{run_batched_study, run_shift_analysis, StudyConfig, StudyData};
use domainsat_core::{AnalysisConfig, Algorithm, BaselineProfile, Category};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{DatasetKind, DatasetStore, Loaded};
use crate::error::{ApiError, ApiResult};
use crate::persist::{read_json_or_default, write_json_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Detect,
    Baseline,
    Cdi,
    Study,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Error,
}

pub const DEFAULT_BATCH_SIZE: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub kind: JobKind,
    pub reference_id: String,
    /// Not used by baseline jobs.
    #[serde(default)]
    pub target_id: Option<String>,
    /// Detect: the selection (all feature algorithms when empty).
    /// Baseline and study: the shift metrics to score.
    #[serde(default)]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub config: AnalysisConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_batches: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Detect: optional profile for fold scores.
    #[serde(default)]
    pub baseline: Option<BaselineProfile>,
    /// Study: predictions paired row by row with feature datasets.
    #[serde(default)]
    pub reference_predictions_id: Option<String>,
    #[serde(default)]
    pub target_predictions_id: Option<String>,
    #[serde(default)]
    pub stratify: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub request: JobRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

impl JobRecord {
    /// The record without its (possibly large) result, for listings.
    pub fn summary(&self) -> JobRecord {
        JobRecord {
            result: None,
            ..self.clone()
        }
    }
}

/// Everything a job needs, resolved and validated before it is queued.
pub enum Prepared {
    Detect {
        reference: Arc<Loaded>,
        target: Arc<Loaded>,
    },
    Baseline {
        reference: Arc<Loaded>,
    },
    Cdi {
        reference: Arc<Loaded>,
        target: Arc<Loaded>,
    },
    Study {
        reference: Side,
        target: Side,
    },
}

#[derive(Default)]
pub struct Side {
    pub features: Option<Arc<Loaded>>,
    pub predictions: Option<Arc<Loaded>>,
}

impl Side {
    fn data(&self) -> StudyData<'_> {
        StudyData {
            features: match self.features.as_deref() {
                Some(Loaded::Features(m)) => Some(m),
                _ => None,
            },
            predictions: match self.predictions.as_deref() {
                Some(Loaded::Predictions(p)) => Some(p),
                _ => None,
            },
        }
    }
}

fn expect_kind(store: &DatasetStore, id: &str, kind: DatasetKind, role: &str) -> ApiResult<Arc<Loaded>> {
    let (record, loaded) = store.load(id)?;
    if record.kind != kind {
        return Err(ApiError::conflict(format!(
            "{role} dataset '{id}' holds {:?} but this job needs {:?}",
            record.kind, kind
        ))
        .with_detail(serde_json::json!({ "id": id, "expected": kind, "found": record.kind })));
    }
    Ok(loaded)
}

fn required<'a>(id: &'a Option<String>, role: &str) -> ApiResult<&'a str> {
    id.as_deref()
        .ok_or_else(|| ApiError::unprocessable(format!("{role} is required for this job kind")))
}

/// Checks ids, dataset kinds and config; 404, 409 or 422 on failure.
pub fn prepare(store: &DatasetStore, req: &JobRequest) -> ApiResult<Prepared> {
    req.config.validate()?;
    match req.kind {
        JobKind::Detect => {
            if let Some(bad) = req.algorithms.iter().find(|a| a.category() == Category::Output) {
                return Err(ApiError::unprocessable(format!("'{bad}' is not a feature-based algorithm")));
            }
            let target = required(&req.target_id, "target_id")?;
            Ok(Prepared::Detect {
                reference: expect_kind(store, &req.reference_id, DatasetKind::Features, "reference")?,
                target: expect_kind(store, target, DatasetKind::Features, "target")?,
            })
        }
        JobKind::Baseline => {
            if req.algorithms.iter().any(|a| !a.is_scalar_shift()) {
                return Err(ApiError::unprocessable("baseline metrics must be distance or ml algorithms"));
            }
            Ok(Prepared::Baseline {
                reference: expect_kind(store, &req.reference_id, DatasetKind::Features, "reference")?,
            })
        }
        JobKind::Cdi => {
            let target = required(&req.target_id, "target_id")?;
            Ok(Prepared::Cdi {
                reference: expect_kind(store, &req.reference_id, DatasetKind::Predictions, "reference")?,
                target: expect_kind(store, target, DatasetKind::Predictions, "target")?,
            })
        }
        JobKind::Study => {
            if req.algorithms.iter().any(|a| !a.is_scalar_shift()) {
                return Err(ApiError::unprocessable("study metrics must be distance or ml algorithms"));
            }
            let target = required(&req.target_id, "target_id")?;
            let side = |main: &str, preds: &Option<String>, role: &str| -> ApiResult<Side> {
                let (record, loaded) = store.load(main)?;
                let mut s = Side::default();
                match record.kind {
                    DatasetKind::Features => s.features = Some(loaded),
                    DatasetKind::Predictions => s.predictions = Some(loaded),
                }
                if let Some(p) = preds {
                    if s.predictions.is_some() {
                        return Err(ApiError::conflict(format!("{role} already is a predictions dataset")));
                    }
                    s.predictions = Some(expect_kind(store, p, DatasetKind::Predictions, role)?);
                }
                Ok(s)
            };
            Ok(Prepared::Study {
                reference: side(&req.reference_id, &req.reference_predictions_id, "reference")?,
                target: side(target, &req.target_predictions_id, "target")?,
            })
        }
    }
}

/// The algorithms a detect request runs: its selection, or every
/// feature-based algorithm when the selection is empty.
pub fn detect_selection(algorithms: &[Algorithm]) -> Vec<Algorithm> {
    if algorithms.is_empty() {
        Algorithm::ALL.iter().copied().filter(|a| a.category() != Category::Output).collect()
    } else {
        algorithms.to_vec()
    }
}

/// Runs a prepared job to its JSON result.
pub fn execute(req: &JobRequest, prepared: &Prepared) -> domainsat_core::Result<Value> {
    let features = |l: &Loaded| match l {
        Loaded::Features(m) => m.clone(),
        Loaded::Predictions(_) => unreachable!("kind checked in prepare"),
    };
    let value = match prepared {
        Prepared::Detect { reference, target } => {
            let (r, t) = (features(reference), features(target));
            let report = run_shift_analysis(&r, &t, &detect_selection(&req.algorithms), &req.config, req.baseline.as_ref(), req.seed)?;
            serde_json::to_value(Report::shift(report)?)?
        }
        Prepared::Baseline { reference } => {
            let r = features(reference);
            let metrics = if req.algorithms.is_empty() {
                vec![Algorithm::Mmd, Algorithm::Wasserstein, Algorithm::Mahalanobis, Algorithm::C2stLogistic]
            } else {
                req.algorithms.clone()
            };
            let profile = build_baseline(
                &r,
                &metrics,
                req.n_batches.unwrap_or(DEFAULT_BATCHES),
                req.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
                &req.config.clone().with_seed(req.seed),
                req.seed,
            )?;
            serde_json::to_value(profile)?
        }
        Prepared::Cdi { reference, target } => {
            let (Loaded::Predictions(r), Loaded::Predictions(t)) = (reference.as_ref(), target.as_ref()) else {
                unreachable!("kind checked in prepare")
            };
            let report = cdi_report(r, t, &req.config.cdi)?;
            serde_json::to_value(Report::cdi(report, &req.config.cdi, req.seed)?)?
        }
        Prepared::Study { reference, target } => {
            let config = study_config(req);
            let report = run_batched_study(reference.data(), target.data(), &config, req.baseline.as_ref(), req.seed)?;
            serde_json::to_value(Report::study(report)?)?
        }
    };
    Ok(value)
}

pub fn study_config(req: &JobRequest) -> StudyConfig {
    let d = StudyConfig::default();
    StudyConfig {
        n_batches: req.n_batches.unwrap_or(d.n_batches),
        batch_size: req.batch_size.unwrap_or(d.batch_size),
        metrics: req.algorithms.clone(),
        stratify: req.stratify.unwrap_or(d.stratify),
        with_replacement: d.with_replacement,
        analysis: req.config.clone(),
    }
}

/// Job registry persisted to `jobs.json` on every transition.
pub struct JobStore {
    path: PathBuf,
    jobs: Mutex<Vec<JobRecord>>,
}

impl JobStore {
    /// Loads the registry; jobs left pending or running by a previous
    /// process are marked as interrupted errors.
    pub fn open(data_dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(data_dir)?;
        let path = data_dir.join("jobs.json");
        let mut jobs: Vec<JobRecord> = read_json_or_default(&path)?;
        let mut changed = false;
        for j in jobs.iter_mut().filter(|j| j.status < JobStatus::Done) {
            j.status = JobStatus::Error;
            j.error = Some("interrupted".into());
            j.finished_at = Some(Utc::now());
            changed = true;
        }
        if changed {
            write_json_atomic(&path, &jobs)?;
        }
        Ok(JobStore {
            path,
            jobs: Mutex::new(jobs),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Vec<JobRecord>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, jobs: &[JobRecord]) {
        // the in-memory registry stays authoritative if the disk write fails
        let _ = write_json_atomic(&self.path, &jobs);
    }

    pub fn create(&self, request: JobRequest) -> JobRecord {
        let record = JobRecord {
            id: uuid::Uuid::new_v4().simple().to_string(),
            kind: request.kind,
            status: JobStatus::Pending,
            request,
            result: None,
            error: None,
            created_at: Utc::now(),
            started_at: None,
            finished_at: None,
        };
        let mut jobs = self.lock();
        jobs.push(record.clone());
        self.persist(&jobs);
        record
    }

    pub fn get(&self, id: &str) -> ApiResult<JobRecord> {
        self.lock()
            .iter()
            .find(|j| j.id == id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", id))
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.lock().iter().map(JobRecord::summary).collect()
    }

    /// Moves a job forward; backwards transitions are ignored.
    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        let mut jobs = self.lock();
        if let Some(j) = jobs.iter_mut().find(|j| j.id == id) {
            let before = j.status;
            f(j);
            if j.status < before {
                j.status = before;
            }
        }
        self.persist(&jobs);
    }

    pub fn mark_running(&self, id: &str) {
        self.update(id, |j| {
            j.status = JobStatus::Running;
            j.started_at = Some(Utc::now());
        });
    }

    pub fn finish(&self, id: &str, outcome: Result<Value, String>) {
        self.update(id, |j| {
            match outcome {
                Ok(v) => {
                    j.status = JobStatus::Done;
                    j.result = Some(v);
                }
                Err(e) => {
                    j.status = JobStatus::Error;
                    j.error = Some(e);
                }
            }
            j.finished_at = Some(Utc::now());
        });
    }
}

//! Uploaded datasets: raw CSV files under `datasets/` plus a JSON index.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use domainsat_core::ingest::{read_features, read_predictions};
use domainsat_core::{FeatureMatrix, PredictionSet};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::persist::{read_json_or_default, write_json_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Features,
    Predictions,
}

impl std::str::FromStr for DatasetKind {
    type Err = ApiError;

    fn from_str(s: &str) -> ApiResult<Self> {
        match s.trim() {
            "features" => Ok(DatasetKind::Features),
            "predictions" => Ok(DatasetKind::Predictions),
            other => Err(ApiError::bad_request(format!(
                "unknown dataset kind '{other}' (expected features or predictions)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub name: String,
    pub kind: DatasetKind,
    pub n: usize,
    /// Feature count; 1 for prediction sets.
    pub d: usize,
    pub has_labels: bool,
    pub uploaded_at: DateTime<Utc>,
    /// Relative to the data directory.
    pub path: String,
}

#[derive(Debug)]
pub enum Loaded {
    Features(FeatureMatrix),
    Predictions(PredictionSet),
}

impl Loaded {
    pub fn parse(kind: DatasetKind, bytes: &[u8]) -> domainsat_core::Result<Self> {
        Ok(match kind {
            DatasetKind::Features => Loaded::Features(read_features(bytes, None)?),
            DatasetKind::Predictions => Loaded::Predictions(read_predictions(bytes, None)?),
        })
    }
}

#[derive(Default)]
struct Inner {
    records: Vec<DatasetRecord>,
    cache: HashMap<String, Arc<Loaded>>,
}

pub struct DatasetStore {
    root: PathBuf,
    inner: Mutex<Inner>,
}

const INDEX: &str = "index.json";

impl DatasetStore {
    pub fn open(data_dir: &Path) -> std::io::Result<Self> {
        let root = data_dir.join("datasets");
        std::fs::create_dir_all(&root)?;
        let records: Vec<DatasetRecord> = read_json_or_default(&root.join(INDEX))?;
        Ok(DatasetStore {
            root,
            inner: Mutex::new(Inner {
                records,
                cache: HashMap::new(),
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn list(&self) -> Vec<DatasetRecord> {
        self.lock().records.clone()
    }

    pub fn get(&self, id: &str) -> ApiResult<DatasetRecord> {
        self.lock()
            .records
            .iter()
            .find(|r| r.id == id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("dataset", id))
    }

    /// Parses and stores an upload. Parsing happens before anything touches
    /// the index, so a rejected upload leaves no trace.
    pub fn insert(&self, name: &str, kind: DatasetKind, bytes: &[u8]) -> ApiResult<DatasetRecord> {
        let loaded = Loaded::parse(kind, bytes)?;
        let (n, d, has_labels) = match &loaded {
            Loaded::Features(m) => (m.n(), m.d(), m.labels().is_some()),
            Loaded::Predictions(p) => (p.len(), 1, p.labels().is_some()),
        };
        let id = uuid::Uuid::new_v4().simple().to_string();
        let file = format!("{id}.csv");
        std::fs::write(self.root.join(&file), bytes).map_err(|e| ApiError::internal(e.to_string()))?;
        let record = DatasetRecord {
            id: id.clone(),
            name: name.to_string(),
            kind,
            n,
            d,
            has_labels,
            uploaded_at: Utc::now(),
            path: format!("datasets/{file}"),
        };
        let mut inner = self.lock();
        inner.records.push(record.clone());
        inner.cache.insert(id, Arc::new(loaded));
        write_json_atomic(&self.root.join(INDEX), &inner.records).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(record)
    }

    pub fn delete(&self, id: &str) -> ApiResult<DatasetRecord> {
        let mut inner = self.lock();
        let pos = inner
            .records
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| ApiError::not_found("dataset", id))?;
        let record = inner.records.remove(pos);
        inner.cache.remove(id);
        write_json_atomic(&self.root.join(INDEX), &inner.records).map_err(|e| ApiError::internal(e.to_string()))?;
        drop(inner);
        let _ = std::fs::remove_file(self.root.join(format!("{id}.csv")));
        Ok(record)
    }

    /// The parsed dataset, loading it from disk on first use after a restart.
    pub fn load(&self, id: &str) -> ApiResult<(DatasetRecord, Arc<Loaded>)> {
        let record = self.get(id)?;
        if let Some(hit) = self.lock().cache.get(id) {
            return Ok((record, Arc::clone(hit)));
        }
        let bytes = std::fs::read(self.root.join(format!("{id}.csv"))).map_err(|e| ApiError::internal(e.to_string()))?;
        let loaded = Arc::new(Loaded::parse(record.kind, &bytes)?);
        self.lock().cache.insert(id.to_string(), Arc::clone(&loaded));
        Ok((record, loaded))
    }
}

//! CSV loaders and writers, and the report file formats.
//!
//! Feature CSVs have a header, an optional `id` column, an optional `label`
//! column (0 or 1) and numeric features. Prediction CSVs carry `p_tumor` in
//! [0, 1] plus optional `id` and `label`. Reports are JSON envelopes; CSV
//! output flattens them to one row per (algorithm, feature).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{CdiReport, FeatureMatrix, PredictionSet};
use crate::pipeline::{BatchedStudyReport, ShiftReport};

pub const DEFAULT_ID_COLUMN: &str = "id";
pub const DEFAULT_LABEL_COLUMN: &str = "label";
pub const DEFAULT_PROBABILITY_COLUMN: &str = "p_tumor";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureColumns {
    /// Every column not claimed by another role.
    #[default]
    Remaining,
    Named(Vec<String>),
}

/// Column roles for a load. Named columns must exist in the header.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub id_column: Option<String>,
    pub label_column: Option<String>,
    pub probability_column: Option<String>,
    pub feature_columns: FeatureColumns,
}

impl CsvSchema {
    /// `id` and `label` if the header has them, features from the rest.
    pub fn detect_features(header: &[String]) -> Self {
        let has = |c: &str| header.iter().any(|h| h == c);
        CsvSchema {
            id_column: has(DEFAULT_ID_COLUMN).then(|| DEFAULT_ID_COLUMN.to_string()),
            label_column: has(DEFAULT_LABEL_COLUMN).then(|| DEFAULT_LABEL_COLUMN.to_string()),
            probability_column: None,
            feature_columns: FeatureColumns::Remaining,
        }
    }

    /// `p_tumor` plus `id` and `label` if present.
    pub fn detect_predictions(header: &[String]) -> Self {
        CsvSchema {
            probability_column: Some(DEFAULT_PROBABILITY_COLUMN.to_string()),
            ..Self::detect_features(header)
        }
    }
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
}

struct Table {
    header: Vec<String>,
    /// (line number, cells)
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Schema("missing header row".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(Error::Schema("file has a header but no data rows".into()));
    }
    Ok(Table { header, rows })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv>", io),
        csv::ErrorKind::Utf8 { .. } => Error::Schema(format!("line {line}: input is not valid UTF-8")),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            Error::Schema(format!("line {line}: expected {expected_len} fields, found {len}"))
        }
        other => Error::Schema(format!("line {line}: {other:?}")),
    }
}

fn parse_number(cell: &str, line: u64, col: &str) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            column: col.to_string(),
            value: cell.to_string(),
            expected: "a finite number",
        }),
    }
}

fn parse_label(cell: &str, line: u64, col: &str) -> Result<u8> {
    match cell.trim() {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        _ => Err(Error::Parse {
            line,
            column: col.to_string(),
            value: cell.to_string(),
            expected: "a label (0 or 1)",
        }),
    }
}

/// Loads a feature CSV from any reader. `None` detects the column roles.
pub fn read_features<R: Read>(reader: R, schema: Option<&CsvSchema>) -> Result<FeatureMatrix> {
    let table = read_table(reader)?;
    let schema = schema.cloned().unwrap_or_else(|| CsvSchema::detect_features(&table.header));
    if schema.probability_column.is_some() {
        return Err(Error::Schema("probability_column cannot be set when loading features".into()));
    }
    let id = schema.id_column.as_deref().map(|c| column(&table.header, c)).transpose()?;
    let label = schema.label_column.as_deref().map(|c| column(&table.header, c)).transpose()?;
    let features: Vec<usize> = match &schema.feature_columns {
        FeatureColumns::Remaining => (0..table.header.len())
            .filter(|&j| Some(j) != id && Some(j) != label)
            .collect(),
        FeatureColumns::Named(names) => names.iter().map(|c| column(&table.header, c)).collect::<Result<_>>()?,
    };
    if features.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let names: Vec<String> = features.iter().map(|&j| table.header[j].clone()).collect();
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut ids = id.map(|_| Vec::with_capacity(table.rows.len()));
    let mut labels = label.map(|_| Vec::with_capacity(table.rows.len()));
    for (line, cells) in &table.rows {
        let row = features
            .iter()
            .map(|&j| parse_number(&cells[j], *line, &table.header[j]))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
        if let (Some(ids), Some(j)) = (ids.as_mut(), id) {
            ids.push(cells[j].clone());
        }
        if let (Some(labels), Some(j)) = (labels.as_mut(), label) {
            labels.push(parse_label(&cells[j], *line, &table.header[j])?);
        }
    }
    FeatureMatrix::new(names, rows, ids, labels)
}

/// Loads a prediction CSV from any reader. `None` uses `p_tumor` and
/// detects `id` and `label`.
pub fn read_predictions<R: Read>(reader: R, schema: Option<&CsvSchema>) -> Result<PredictionSet> {
    let table = read_table(reader)?;
    let schema = schema.cloned().unwrap_or_else(|| CsvSchema::detect_predictions(&table.header));
    let p_name = schema
        .probability_column
        .as_deref()
        .ok_or_else(|| Error::Schema("probability_column must be declared for predictions".into()))?;
    if let FeatureColumns::Named(names) = &schema.feature_columns {
        if names.iter().any(|n| n == p_name) {
            return Err(Error::Schema(format!("'{p_name}' cannot be both a feature and the probability column")));
        }
    }
    let p_col = column(&table.header, p_name)?;
    let id = schema.id_column.as_deref().map(|c| column(&table.header, c)).transpose()?;
    let label = schema.label_column.as_deref().map(|c| column(&table.header, c)).transpose()?;
    let mut p = Vec::with_capacity(table.rows.len());
    let mut ids = id.map(|_| Vec::with_capacity(table.rows.len()));
    let mut labels = label.map(|_| Vec::with_capacity(table.rows.len()));
    for (line, cells) in &table.rows {
        let v = parse_number(&cells[p_col], *line, p_name)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range {
                line: *line,
                column: p_name.to_string(),
                value: v,
            });
        }
        p.push(v);
        if let (Some(ids), Some(j)) = (ids.as_mut(), id) {
            ids.push(cells[j].clone());
        }
        if let (Some(labels), Some(j)) = (labels.as_mut(), label) {
            labels.push(parse_label(&cells[j], *line, &table.header[j])?);
        }
    }
    PredictionSet::new(p, labels, ids)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

pub fn load_features_csv(path: impl AsRef<Path>, schema: Option<&CsvSchema>) -> Result<FeatureMatrix> {
    read_features(open(path.as_ref())?, schema)
}

pub fn load_predictions_csv(path: impl AsRef<Path>, schema: Option<&CsvSchema>) -> Result<PredictionSet> {
    read_predictions(open(path.as_ref())?, schema)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

fn write_err(e: csv::Error) -> Error {
    csv_error(e)
}

pub fn write_features<W: Write>(matrix: &FeatureMatrix, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    let mut header: Vec<String> = Vec::new();
    if matrix.sample_ids().is_some() {
        header.push(DEFAULT_ID_COLUMN.into());
    }
    header.extend(matrix.feature_names().iter().cloned());
    if matrix.labels().is_some() {
        header.push(DEFAULT_LABEL_COLUMN.into());
    }
    out.write_record(&header).map_err(write_err)?;
    for (i, row) in matrix.rows().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ids) = matrix.sample_ids() {
            rec.push(ids[i].clone());
        }
        rec.extend(row.iter().map(f64::to_string));
        if let Some(l) = matrix.labels() {
            rec.push(l[i].to_string());
        }
        out.write_record(&rec).map_err(write_err)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_predictions<W: Write>(preds: &PredictionSet, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    let mut header: Vec<&str> = Vec::new();
    if preds.sample_ids().is_some() {
        header.push(DEFAULT_ID_COLUMN);
    }
    header.push(DEFAULT_PROBABILITY_COLUMN);
    if preds.labels().is_some() {
        header.push(DEFAULT_LABEL_COLUMN);
    }
    out.write_record(&header).map_err(write_err)?;
    for (i, p) in preds.p_positive().iter().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(3);
        if let Some(ids) = preds.sample_ids() {
            rec.push(ids[i].clone());
        }
        rec.push(p.to_string());
        if let Some(l) = preds.labels() {
            rec.push(l[i].to_string());
        }
        out.write_record(&rec).map_err(write_err)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

pub fn write_features_csv(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_features(matrix, create(path.as_ref())?)
}

pub fn write_predictions_csv(preds: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    write_predictions(preds, create(path.as_ref())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "results", rename_all = "snake_case")]
pub enum ReportBody {
    Shift(ShiftReport),
    Cdi(CdiReport),
    Study(BatchedStudyReport),
}

/// On-disk report: `{"kind", "config", "results", "seed", "version"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub body: ReportBody,
    pub config: Value,
    pub seed: u64,
    pub version: String,
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

impl Report {
    pub fn shift(report: ShiftReport) -> Result<Self> {
        Ok(Report {
            config: serde_json::to_value(&report.config)?,
            seed: report.seed,
            body: ReportBody::Shift(report),
            version: VERSION.to_string(),
        })
    }

    pub fn study(report: BatchedStudyReport) -> Result<Self> {
        Ok(Report {
            config: serde_json::to_value(&report.config)?,
            seed: report.seed,
            body: ReportBody::Study(report),
            version: VERSION.to_string(),
        })
    }

    pub fn cdi(report: CdiReport, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Report {
            config: serde_json::to_value(config)?,
            seed,
            body: ReportBody::Cdi(report),
            version: VERSION.to_string(),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            ReportBody::Shift(_) => "shift",
            ReportBody::Cdi(_) => "cdi",
            ReportBody::Study(_) => "study",
        }
    }

    /// Whether the report should signal an alarm to scripts.
    pub fn alarm(&self) -> bool {
        match &self.body {
            ReportBody::Shift(r) => r.alarm(),
            ReportBody::Cdi(r) => r.alarm,
            ReportBody::Study(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(Error::InvalidConfig(format!("unknown format '{s}' (expected json or csv)"))),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json_string(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_report(report: &Report, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    match format {
        Format::Json => write_json(report, path),
        Format::Csv => {
            let f = create(path)?;
            report_to_csv(report, f)
        }
    }
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Report> {
    read_json(path)
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

const SHIFT_HEADER: [&str; 10] = [
    "section",
    "algorithm",
    "feature",
    "value",
    "fold_value",
    "statistic",
    "p_value",
    "corrected_p",
    "alarm",
    "message",
];

/// Flattens a report. Shift reports give one summary row per algorithm plus
/// one row per feature detail; study reports give one row per batch plus
/// `mean` and `std` rows; CDI reports give one `field,value` row per field.
pub fn report_to_csv<W: Write>(report: &Report, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    match &report.body {
        ReportBody::Shift(r) => {
            out.write_record(SHIFT_HEADER).map_err(write_err)?;
            let blank = String::new;
            for s in &r.scores {
                out.write_record([
                    "score".into(),
                    s.metric_name.to_string(),
                    blank(),
                    num(s.raw_value),
                    opt(s.fold_value),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                ])
                .map_err(write_err)?;
                for fv in s.detail.iter().flatten() {
                    out.write_record([
                        "score".into(),
                        s.metric_name.to_string(),
                        fv.feature.clone(),
                        num(fv.value),
                        blank(),
                        blank(),
                        blank(),
                        blank(),
                        blank(),
                        blank(),
                    ])
                    .map_err(write_err)?;
                }
            }
            for t in &r.tests {
                out.write_record([
                    "test".into(),
                    t.test_name.to_string(),
                    blank(),
                    blank(),
                    blank(),
                    num(t.statistic),
                    num(t.p_value),
                    blank(),
                    t.alarm.to_string(),
                    blank(),
                ])
                .map_err(write_err)?;
                for f in &t.per_feature {
                    out.write_record([
                        "test".into(),
                        t.test_name.to_string(),
                        f.feature.clone(),
                        blank(),
                        blank(),
                        num(f.statistic),
                        num(f.p_value),
                        num(f.corrected_p),
                        blank(),
                        blank(),
                    ])
                    .map_err(write_err)?;
                }
            }
            for d in &r.detectors {
                out.write_record([
                    "detector".into(),
                    d.detector_name.to_string(),
                    blank(),
                    num(d.score),
                    opt(d.fold_value),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                ])
                .map_err(write_err)?;
            }
            for e in &r.errors {
                out.write_record([
                    "error".into(),
                    e.algorithm.to_string(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    e.message.clone(),
                ])
                .map_err(write_err)?;
            }
        }
        ReportBody::Cdi(r) => {
            out.write_record(["field", "value"]).map_err(write_err)?;
            let rows = [
                ("cdi_m_ref", Some(r.cdi_m_ref)),
                ("cdi_m_target", Some(r.cdi_m_target)),
                ("delta_cdi_m", Some(r.delta_cdi_m)),
                ("cdi_h_ref", Some(r.cdi_h_ref)),
                ("cdi_h_target", Some(r.cdi_h_target)),
                ("delta_cdi_h", Some(r.delta_cdi_h)),
                ("auc_ref", r.auc_ref),
                ("auc_target", r.auc_target),
                ("delta_auc", r.delta_auc),
                ("boundary", Some(r.boundary)),
                ("alarm_threshold", Some(r.alarm_threshold)),
            ];
            for (k, v) in rows.into_iter().filter(|(_, v)| v.is_some()) {
                out.write_record([k.to_string(), opt(v)]).map_err(write_err)?;
            }
            out.write_record(["alarm".to_string(), r.alarm.to_string()]).map_err(write_err)?;
        }
        ReportBody::Study(r) => {
            let columns: Vec<&String> = r.aggregates.keys().collect();
            let mut header = vec!["batch".to_string()];
            header.extend(columns.iter().map(|c| c.to_string()));
            out.write_record(&header).map_err(write_err)?;
            for rec in &r.records {
                let values = rec.columns();
                let mut row = vec![rec.batch.to_string()];
                for c in &columns {
                    row.push(opt(values.iter().find(|(k, _)| k == *c).map(|(_, v)| *v)));
                }
                out.write_record(&row).map_err(write_err)?;
            }
            for (label, pick) in [("mean", 0usize), ("std", 1usize)] {
                let mut row = vec![label.to_string()];
                for c in &columns {
                    let s = r.aggregates[*c];
                    row.push(num(if pick == 0 { s.mean } else { s.std }));
                }
                out.write_record(&row).map_err(write_err)?;
            }
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

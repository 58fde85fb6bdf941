use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use domainsat_core::head::{generate_scenario, ScenarioConfig, ScenarioKind};
use domainsat_core::ingest::{
    load_features_csv, load_predictions_csv, read_json, report_to_csv, to_json_string, write_features_csv, write_json,
    write_predictions_csv, write_report, Format, Report, ReportBody,
};
use domainsat_core::pipeline::{feature_histogram, HistogramSource, DEFAULT_HISTOGRAM_BINS, SELECTOR_P_POSITIVE};
use domainsat_core::{AnalysisConfig, Algorithm, BaselineProfile, Category};
use domainsat_service::datasets::{DatasetKind, Loaded};
use domainsat_service::jobs::{execute, JobKind, JobRequest, Prepared, Side};
use domainsat_service::ServiceConfig;

const EXIT_ALARM: u8 = 2;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] domainsat_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

type CliResult<T> = Result<T, CliError>;

/// Distribution shift detection and confidence-based degradation monitoring.
#[derive(Debug, Parser)]
#[command(name = "domainsat", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random choice (splits, permutations, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; reports go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format: json or csv (csv applies to detect, cdi and study).
    #[arg(long, global = true, default_value = "json")]
    format: String,
    /// Analysis config as inline JSON or a path to a JSON file. Sections:
    /// metric, test, detector, cdi.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Worker threads for parallel sections (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for service state.
    #[arg(long, global = true, env = "DOMAINSAT_DATA_DIR", default_value = "domainsat-data")]
    data_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run shift metrics, tests and detectors on two feature CSVs. Exits 2 when a test alarms.
    Detect(DetectArgs),
    /// Build an ID baseline profile from reference batches.
    Baseline(BaselineArgs),
    /// Compare confidence indicators of two prediction CSVs. Exits 2 on a CDI alarm.
    Cdi(CdiArgs),
    /// Run the batched study: n batches from the target, each scored against the reference.
    Study(StudyArgs),
    /// Shared-edge histograms of one feature or of predicted probabilities.
    Histogram(HistogramArgs),
    /// Write a synthetic scenario as feature and prediction CSVs.
    Synth(SynthArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Comma-separated distance metric ids (mmd, wasserstein, mahalanobis, js, kl).
    #[arg(long)]
    metrics: Option<String>,
    /// Comma-separated test ids (ks, rank_sum, cvm, chi2).
    #[arg(long)]
    tests: Option<String>,
    /// Comma-separated detector ids (domain_classifier, c2st_logistic, c2st_rf, autoencoder).
    #[arg(long)]
    detectors: Option<String>,
    /// Significance level for every test (overrides the config).
    #[arg(long)]
    alpha: Option<f64>,
    /// Baseline profile JSON for fold scores.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    reference: PathBuf,
    /// Comma-separated distance or ml ids [default: mmd,wasserstein,mahalanobis,c2st_logistic].
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long, default_value_t = 20)]
    batches: usize,
    #[arg(long, default_value_t = 5000)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct CdiArgs {
    #[arg(long)]
    reference_preds: PathBuf,
    #[arg(long)]
    target_preds: PathBuf,
    /// Decision boundary for the margin indicator (overrides the config).
    #[arg(long)]
    boundary: Option<f64>,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// Reference feature CSV.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Target feature CSV.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    reference_preds: Option<PathBuf>,
    #[arg(long)]
    target_preds: Option<PathBuf>,
    /// Comma-separated distance or ml ids scored per batch.
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long, default_value_t = 20)]
    batches: usize,
    #[arg(long, default_value_t = 5000)]
    batch_size: usize,
    /// Sample batches without keeping the class ratio.
    #[arg(long)]
    no_stratify: bool,
    /// Baseline profile JSON; built from the reference when omitted.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HistogramArgs {
    /// CSV files, one group each (group name is the file stem).
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Dataset kind of every input: features or predictions.
    #[arg(long, default_value = "features")]
    kind: String,
    /// Feature name, "p_positive" or "p_positive split by label".
    #[arg(long)]
    selector: Option<String>,
    #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
    bins: usize,
    /// Add per-group frequencies.
    #[arg(long)]
    normalized: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// id, benign or harmful.
    #[arg(long, default_value = "id")]
    kind: String,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Defaults to 5 for benign and 2.5 for harmful.
    #[arg(long)]
    shift_magnitude: Option<f64>,
    #[arg(long, default_value_t = 3.0)]
    class_separation: f64,
    #[arg(long, default_value_t = 100.0)]
    logit_scale: f64,
    /// Directory for <prefix>_features.csv and <prefix>_predictions.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// File name prefix [default: the kind].
    #[arg(long)]
    prefix: Option<String>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Concurrent jobs [default: CPU count].
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = domainsat_service::DEFAULT_MAX_UPLOAD_BYTES)]
    max_upload_bytes: usize,
    /// Built UI bundle to serve at /.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::from(EXIT_ALARM),
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether an alarm fired.
fn run(cli: Cli) -> CliResult<bool> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let format: Format = g.format.parse()?;
    match cli.command {
        Command::Detect(a) => detect(g, format, a),
        Command::Baseline(a) => json_only(format).and_then(|_| baseline(g, a)),
        Command::Cdi(a) => cdi(g, format, a),
        Command::Study(a) => study(g, format, a),
        Command::Histogram(a) => json_only(format).and_then(|_| histogram(g, a)),
        Command::Synth(a) => synth(g, a),
        Command::Serve(a) => serve(g, a),
    }
}

fn json_only(format: Format) -> CliResult<()> {
    match format {
        Format::Json => Ok(()),
        Format::Csv => Err(CliError::Usage("--format csv applies to detect, cdi and study only".into())),
    }
}

fn analysis_config(g: &Global) -> CliResult<AnalysisConfig> {
    let Some(raw) = &g.config else {
        return Ok(AnalysisConfig::default());
    };
    let text = if raw.trim_start().starts_with('{') {
        raw.clone()
    } else {
        std::fs::read_to_string(raw).map_err(|source| CliError::Io {
            context: format!("cannot read config '{raw}'"),
            source,
        })?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

fn algorithms_of(list: &Option<String>, category: Category, flag: &str) -> CliResult<Vec<Algorithm>> {
    let parsed = match list {
        Some(s) => Algorithm::parse_list(s)?,
        None => return Ok(Vec::new()),
    };
    if let Some(bad) = parsed.iter().find(|a| a.category() != category) {
        return Err(CliError::Usage(format!("'{bad}' is not accepted by --{flag}")));
    }
    Ok(parsed)
}

fn scalar_metrics(list: &Option<String>) -> CliResult<Vec<Algorithm>> {
    let parsed = match list {
        Some(s) => Algorithm::parse_list(s)?,
        None => return Ok(Vec::new()),
    };
    if let Some(bad) = parsed.iter().find(|a| !a.is_scalar_shift()) {
        return Err(CliError::Usage(format!("'{bad}' is not a distance or ml algorithm")));
    }
    Ok(parsed)
}

fn features(path: &Path) -> CliResult<Arc<Loaded>> {
    Ok(Arc::new(Loaded::Features(load_features_csv(path, None)?)))
}

fn predictions(path: &Path) -> CliResult<Arc<Loaded>> {
    Ok(Arc::new(Loaded::Predictions(load_predictions_csv(path, None)?)))
}

fn request(kind: JobKind, g: &Global, config: AnalysisConfig) -> JobRequest {
    JobRequest {
        kind,
        reference_id: String::new(),
        target_id: None,
        algorithms: Vec::new(),
        config,
        seed: g.seed,
        n_batches: None,
        batch_size: None,
        baseline: None,
        reference_predictions_id: None,
        target_predictions_id: None,
        stratify: None,
    }
}

fn load_baseline(path: &Option<PathBuf>) -> CliResult<Option<BaselineProfile>> {
    path.as_ref().map(read_json).transpose().map_err(Into::into)
}

/// Prints the summary to stdout when the report goes to a file, and to
/// stderr when the report itself occupies stdout.
fn emit(g: &Global, format: Format, report: &Report) -> CliResult<bool> {
    let lines = summary(report);
    match &g.out {
        Some(path) => {
            write_report(report, path, format)?;
            lines.iter().for_each(|l| println!("{l}"));
        }
        None => {
            lines.iter().for_each(|l| eprintln!("{l}"));
            let stdout = std::io::stdout();
            match format {
                Format::Json => {
                    let _ = stdout.lock().write_all(to_json_string(report)?.as_bytes());
                }
                Format::Csv => report_to_csv(report, stdout.lock())?,
            }
        }
    }
    Ok(report.alarm())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn summary(report: &Report) -> Vec<String> {
    let mut out = Vec::new();
    match &report.body {
        ReportBody::Shift(r) => {
            for s in &r.scores {
                out.push(format!("{:<18} raw={:.6} fold={}", s.metric_name, s.raw_value, fmt_opt(s.fold_value)));
            }
            for d in &r.detectors {
                out.push(format!("{:<18} score={:.6} fold={}", d.detector_name, d.score, fmt_opt(d.fold_value)));
            }
            for t in &r.tests {
                out.push(format!(
                    "{:<18} statistic={:.6} p={:.6} alarm={}",
                    t.test_name, t.statistic, t.p_value, t.alarm
                ));
            }
            for e in &r.errors {
                out.push(format!("{:<18} error: {}", e.algorithm.id(), e.message));
            }
        }
        ReportBody::Cdi(r) => {
            out.push(format!("CDI_M  reference={:.6} target={:.6} delta={:.6}", r.cdi_m_ref, r.cdi_m_target, r.delta_cdi_m));
            out.push(format!("CDI_H  reference={:.6} target={:.6} delta={:.6}", r.cdi_h_ref, r.cdi_h_target, r.delta_cdi_h));
            if let Some(delta) = r.delta_auc {
                out.push(format!("AUC    reference={} target={} delta={delta:.6}", fmt_opt(r.auc_ref), fmt_opt(r.auc_target)));
            }
            out.push(format!("alarm={} (threshold {})", r.alarm, r.alarm_threshold));
        }
        ReportBody::Study(r) => {
            for (column, s) in &r.aggregates {
                out.push(format!("{column:<24} mean={:.6} std={:.6}", s.mean, s.std));
            }
        }
    }
    out
}

fn report_of(value: serde_json::Value) -> CliResult<Report> {
    serde_json::from_value(value).map_err(|e| domainsat_core::Error::from(e).into())
}

fn detect(g: &Global, format: Format, a: DetectArgs) -> CliResult<bool> {
    let mut config = analysis_config(g)?;
    if let Some(alpha) = a.alpha {
        config.test.alpha = alpha;
    }
    let mut req = request(JobKind::Detect, g, config);
    req.algorithms = [
        algorithms_of(&a.metrics, Category::Distance, "metrics")?,
        algorithms_of(&a.tests, Category::Statistic, "tests")?,
        algorithms_of(&a.detectors, Category::Ml, "detectors")?,
    ]
    .concat();
    req.baseline = load_baseline(&a.baseline)?;
    req.config.validate()?;
    let prepared = Prepared::Detect {
        reference: features(&a.reference)?,
        target: features(&a.target)?,
    };
    emit(g, format, &report_of(execute(&req, &prepared)?)?)
}

fn baseline(g: &Global, a: BaselineArgs) -> CliResult<bool> {
    let mut req = request(JobKind::Baseline, g, analysis_config(g)?);
    req.algorithms = scalar_metrics(&a.metrics)?;
    req.n_batches = Some(a.batches);
    req.batch_size = Some(a.batch_size);
    req.config.validate()?;
    let prepared = Prepared::Baseline {
        reference: features(&a.reference)?,
    };
    let profile: BaselineProfile = serde_json::from_value(execute(&req, &prepared)?).map_err(domainsat_core::Error::from)?;
    let path = g.out.clone().unwrap_or_else(|| PathBuf::from("baseline.json"));
    write_json(&profile, &path)?;
    for (alg, v) in &profile.values {
        println!("{:<18} baseline={v:.6}", alg.id());
    }
    println!("wrote {} ({} batches of {})", path.display(), profile.n_batches, profile.batch_size);
    Ok(false)
}

fn cdi(g: &Global, format: Format, a: CdiArgs) -> CliResult<bool> {
    let mut config = analysis_config(g)?;
    if let Some(b) = a.boundary {
        config.cdi.boundary = b;
    }
    let req = request(JobKind::Cdi, g, config);
    req.config.validate()?;
    let prepared = Prepared::Cdi {
        reference: predictions(&a.reference_preds)?,
        target: predictions(&a.target_preds)?,
    };
    emit(g, format, &report_of(execute(&req, &prepared)?)?)
}

fn study(g: &Global, format: Format, a: StudyArgs) -> CliResult<bool> {
    let mut req = request(JobKind::Study, g, analysis_config(g)?);
    req.algorithms = scalar_metrics(&a.metrics)?;
    req.n_batches = Some(a.batches);
    req.batch_size = Some(a.batch_size);
    req.stratify = Some(!a.no_stratify);
    req.baseline = load_baseline(&a.baseline)?;
    req.config.validate()?;
    let side = |f: &Option<PathBuf>, p: &Option<PathBuf>| -> CliResult<Side> {
        Ok(Side {
            features: f.as_deref().map(features).transpose()?,
            predictions: p.as_deref().map(predictions).transpose()?,
        })
    };
    let prepared = Prepared::Study {
        reference: side(&a.reference, &a.reference_preds)?,
        target: side(&a.target, &a.target_preds)?,
    };
    emit(g, format, &report_of(execute(&req, &prepared)?)?)
}

fn histogram(g: &Global, a: HistogramArgs) -> CliResult<bool> {
    let kind: DatasetKind = a.kind.parse().map_err(|e: domainsat_service::error::ApiError| CliError::Usage(e.message))?;
    let loaded = a
        .inputs
        .iter()
        .map(|p| match kind {
            DatasetKind::Features => features(p),
            DatasetKind::Predictions => predictions(p),
        })
        .collect::<CliResult<Vec<_>>>()?;
    let selector = match (&a.selector, loaded[0].as_ref()) {
        (Some(s), _) => s.clone(),
        (None, Loaded::Predictions(_)) => SELECTOR_P_POSITIVE.to_string(),
        (None, Loaded::Features(m)) => m.feature_names()[0].clone(),
    };
    let groups: Vec<(String, HistogramSource<'_>)> = a
        .inputs
        .iter()
        .zip(&loaded)
        .enumerate()
        .map(|(i, (path, data))| {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = if a.inputs[..i].iter().any(|p| p.file_stem() == path.file_stem()) {
                format!("{stem} ({})", i + 1)
            } else {
                stem
            };
            let src = match data.as_ref() {
                Loaded::Features(m) => HistogramSource::Features(m),
                Loaded::Predictions(p) => HistogramSource::Predictions(p),
            };
            (name, src)
        })
        .collect();
    let summary = feature_histogram(&groups, &selector, a.bins, a.normalized)?;
    match &g.out {
        Some(path) => write_json(&summary, path)?,
        None => print!("{}", to_json_string(&summary)?),
    }
    Ok(false)
}

fn synth(g: &Global, a: SynthArgs) -> CliResult<bool> {
    let kind: ScenarioKind = a.kind.parse()?;
    let config = ScenarioConfig {
        kind,
        n: a.n,
        d: a.d,
        class_separation: a.class_separation,
        shift_magnitude: a.shift_magnitude,
        logit_scale: a.logit_scale,
        seed: g.seed,
        ..ScenarioConfig::default()
    };
    let scenario = generate_scenario(&config)?;
    let prefix = a.prefix.unwrap_or_else(|| {
        match kind {
            ScenarioKind::Id => "id",
            ScenarioKind::BenignShift => "benign",
            ScenarioKind::HarmfulShift => "harmful",
        }
        .to_string()
    });
    std::fs::create_dir_all(&a.out_dir).map_err(|source| CliError::Io {
        context: format!("cannot create '{}'", a.out_dir.display()),
        source,
    })?;
    let fpath = a.out_dir.join(format!("{prefix}_features.csv"));
    let ppath = a.out_dir.join(format!("{prefix}_predictions.csv"));
    write_features_csv(&scenario.features, &fpath)?;
    write_predictions_csv(&scenario.predictions, &ppath)?;
    println!("wrote {} and {}", fpath.display(), ppath.display());
    Ok(false)
}

fn serve(g: &Global, a: ServeArgs) -> CliResult<bool> {
    let mut config = ServiceConfig::new(&g.data_dir);
    config.max_upload_bytes = a.max_upload_bytes;
    config.static_dir = a.static_dir;
    if let Some(w) = a.workers {
        config.workers = w.max(1);
    }
    let addr = SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
        context: "cannot start runtime".into(),
        source,
    })?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| CliError::Io {
            context: format!("cannot bind {addr}"),
            source,
        })?;
        eprintln!("serving on http://{addr} (data dir {})", g.data_dir.display());
        domainsat_service::serve_listener(config, listener)
            .await
            .map_err(|source| CliError::Io {
                context: "service stopped".into(),
                source,
            })
    })?;
    Ok(false)
}

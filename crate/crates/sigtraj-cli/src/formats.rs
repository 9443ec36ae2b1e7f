//! On-disk formats: the cohort CSV pair with its metadata JSON, trained-model
//! envelopes, forecast and report CSVs, and run manifests. All writes are
//! atomic (write to a temp file, then rename).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sigtraj::analysis::{RiskFactorRow, TrajectoryExport};
use sigtraj::benchmarks::{LmeFit, StratifiedLinear, StratifiedSigmoid};
use sigtraj::cohort::{AttributeMeta, Cohort, CohortMeta, SubjectRecord, TargetMeta, Visit};
use sigtraj::evaluation::EvalReport;
use sigtraj::inference::{TrainSummary, VariationalState};
use sigtraj::model::{LatentState, ModelParams, SubjectAttributes};
use sigtraj::prediction::PosteriorForecast;

use crate::{CliError, CliResult};

pub const FORMAT_VERSION: &str = "1";

// ---------------------------------------------------------------------------
// Atomic writes and hashing
// ---------------------------------------------------------------------------

/// Write-temp-then-rename; the rename makes the update atomic on one
/// filesystem.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::Input(format!("invalid output path {}", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// FNV-1a 64-bit, hex-encoded; used to fingerprint configurations.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

// ---------------------------------------------------------------------------
// Cohort files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CohortPaths {
    pub visits: PathBuf,
    pub attributes: PathBuf,
    pub meta: PathBuf,
}

impl CohortPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            visits: dir.join("visits.csv"),
            attributes: dir.join("attributes.csv"),
            meta: dir.join("meta.json"),
        }
    }

    pub fn all(&self) -> [&Path; 3] {
        [&self.visits, &self.attributes, &self.meta]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    format_version: String,
    targets: Vec<TargetMeta>,
    attributes: Vec<AttributeMeta>,
}

pub fn save_cohort(cohort: &Cohort, paths: &CohortPaths) -> CliResult<()> {
    let meta = MetaFile {
        format_version: FORMAT_VERSION.to_string(),
        targets: cohort.meta.targets.clone(),
        attributes: cohort.meta.attributes.clone(),
    };
    atomic_write(&paths.meta, serde_json::to_string_pretty(&meta)?.as_bytes())?;

    let mut attr_csv = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["subject_id".to_string()];
    header.extend(cohort.meta.attributes.iter().map(|a| a.name.clone()));
    attr_csv
        .write_record(&header)
        .map_err(|e| CliError::Input(e.to_string()))?;
    for subject in &cohort.subjects {
        let mut record = vec![subject.id.clone()];
        record.extend(subject.attributes.values.iter().map(|v| format!("{v}")));
        attr_csv
            .write_record(&record)
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    let bytes = attr_csv
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))?;
    atomic_write(&paths.attributes, &bytes)?;

    let mut visit_csv = csv::WriterBuilder::new().from_writer(Vec::new());
    visit_csv
        .write_record(["subject_id", "age_years", "target_name", "value"])
        .map_err(|e| CliError::Input(e.to_string()))?;
    for subject in &cohort.subjects {
        for visit in &subject.visits {
            for (k, value) in visit.values.iter().enumerate() {
                visit_csv
                    .write_record([
                        subject.id.as_str(),
                        &format!("{}", visit.age),
                        cohort.meta.targets[k].name.as_str(),
                        &value.map(|v| format!("{v}")).unwrap_or_default(),
                    ])
                    .map_err(|e| CliError::Input(e.to_string()))?;
            }
        }
    }
    let bytes = visit_csv
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))?;
    atomic_write(&paths.visits, &bytes)?;
    Ok(())
}

fn input_err(path: &Path, row: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}, row {row}: {msg}", path.display()))
}

pub fn load_cohort(paths: &CohortPaths) -> CliResult<Cohort> {
    let meta_text = fs::read_to_string(&paths.meta)
        .map_err(|e| CliError::Input(format!("{}: {e}", paths.meta.display())))?;
    let meta_file: MetaFile = serde_json::from_str(&meta_text)
        .map_err(|e| CliError::Input(format!("{}: {e}", paths.meta.display())))?;
    if meta_file.format_version != FORMAT_VERSION {
        return Err(CliError::Input(format!(
            "{}: unsupported format version {:?}",
            paths.meta.display(),
            meta_file.format_version
        )));
    }
    let meta = CohortMeta {
        targets: meta_file.targets,
        attributes: meta_file.attributes,
    };
    if meta.targets.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no targets declared",
            paths.meta.display()
        )));
    }

    // attributes file: fixed header, one row per subject, order preserved
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&paths.attributes)
        .map_err(|e| CliError::Input(format!("{}: {e}", paths.attributes.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| CliError::Input(format!("{}: {e}", paths.attributes.display())))?;
        let mut expected = vec!["subject_id".to_string()];
        expected.extend(meta.attributes.iter().map(|a| a.name.clone()));
        let got: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
        if got != expected {
            return Err(CliError::Input(format!(
                "{}: header {:?} does not match declared attributes {:?}",
                paths.attributes.display(),
                got,
                expected
            )));
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut attrs: BTreeMap<String, SubjectAttributes> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| input_err(&paths.attributes, row, e))?;
        if record.len() != meta.attributes.len() + 1 {
            return Err(input_err(
                &paths.attributes,
                row,
                format!("expected {} fields", meta.attributes.len() + 1),
            ));
        }
        let id = record[0].to_string();
        if attrs.contains_key(&id) {
            return Err(input_err(
                &paths.attributes,
                row,
                format!("duplicate subject id {id:?}"),
            ));
        }
        let mut values = Vec::with_capacity(meta.attributes.len());
        for field in record.iter().skip(1) {
            let value: f64 = field
                .parse()
                .map_err(|e| input_err(&paths.attributes, row, format!("bad number {field:?}: {e}")))?;
            if !value.is_finite() {
                return Err(input_err(&paths.attributes, row, "non-finite attribute"));
            }
            values.push(value);
        }
        order.push(id.clone());
        attrs.insert(id, SubjectAttributes::new(values));
    }

    // visits file: long format, one row per (visit, target)
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&paths.visits)
        .map_err(|e| CliError::Input(format!("{}: {e}", paths.visits.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| CliError::Input(format!("{}: {e}", paths.visits.display())))?;
        let expected = ["subject_id", "age_years", "target_name", "value"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(CliError::Input(format!(
                "{}: expected header {:?}",
                paths.visits.display(),
                expected
            )));
        }
    }
    let m = meta.targets.len();
    let mut visits: BTreeMap<String, BTreeMap<u64, Visit>> = BTreeMap::new();
    let mut seen: BTreeSet<(String, u64, usize)> = BTreeSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| input_err(&paths.visits, row, e))?;
        if record.len() != 4 {
            return Err(input_err(&paths.visits, row, "expected 4 fields"));
        }
        let id = record[0].to_string();
        if !attrs.contains_key(&id) {
            return Err(input_err(
                &paths.visits,
                row,
                format!("subject {id:?} is missing from the attributes file"),
            ));
        }
        let age: f64 = record[1]
            .parse()
            .map_err(|e| input_err(&paths.visits, row, format!("bad age {:?}: {e}", &record[1])))?;
        if !age.is_finite() {
            return Err(input_err(&paths.visits, row, "non-finite age"));
        }
        let target = meta.target_index(&record[2]).ok_or_else(|| {
            input_err(
                &paths.visits,
                row,
                format!("unknown target name {:?}", &record[2]),
            )
        })?;
        let value = if record[3].is_empty() {
            None
        } else {
            let v: f64 = record[3].parse().map_err(|e| {
                input_err(&paths.visits, row, format!("bad value {:?}: {e}", &record[3]))
            })?;
            if !v.is_finite() {
                return Err(input_err(&paths.visits, row, "non-finite value"));
            }
            Some(v)
        };
        let key = (id.clone(), age.to_bits(), target);
        if !seen.insert(key) {
            return Err(input_err(
                &paths.visits,
                row,
                format!(
                    "duplicate entry for subject {id:?}, age {age}, target {:?}",
                    &record[2]
                ),
            ));
        }
        let visit = visits
            .entry(id)
            .or_default()
            .entry(age.to_bits())
            .or_insert_with(|| Visit {
                age,
                values: vec![None; m],
            });
        visit.values[target] = value;
    }

    let subjects = order
        .into_iter()
        .map(|id| {
            let subject_visits = visits
                .remove(&id)
                .map(|by_age| by_age.into_values().collect::<Vec<_>>())
                .unwrap_or_default();
            let mut subject_visits = subject_visits;
            subject_visits.sort_by(|a, b| a.age.partial_cmp(&b.age).unwrap());
            SubjectRecord {
                id: id.clone(),
                attributes: attrs.remove(&id).expect("attribute map entry"),
                visits: subject_visits,
            }
        })
        .collect();

    let cohort = Cohort { meta, subjects };
    cohort.validate()?;
    Ok(cohort)
}

// ---------------------------------------------------------------------------
// Ground-truth sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub subject_id: String,
    pub slope: f64,
    pub inflections: Vec<f64>,
}

pub fn save_ground_truth(
    cohort: &Cohort,
    truths: &[LatentState],
    path: &Path,
) -> CliResult<()> {
    let entries: Vec<GroundTruthEntry> = cohort
        .subjects
        .iter()
        .zip(truths)
        .map(|(subject, latent)| GroundTruthEntry {
            subject_id: subject.id.clone(),
            slope: latent.slope,
            inflections: latent.inflections.clone(),
        })
        .collect();
    atomic_write(path, serde_json::to_string_pretty(&entries)?.as_bytes())
}

// ---------------------------------------------------------------------------
// Model envelope
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    Progression {
        targets: Vec<TargetMeta>,
        attributes: Vec<AttributeMeta>,
        age_range: Option<(f64, f64)>,
        params: ModelParams,
        proxies: Vec<VariationalState>,
        subject_ids: Vec<String>,
        summary: TrainSummary,
    },
    BenchmarkSigmoid {
        targets: Vec<TargetMeta>,
        fit: StratifiedSigmoid,
    },
    BenchmarkLinear {
        targets: Vec<TargetMeta>,
        fit: StratifiedLinear,
    },
    BenchmarkLme {
        targets: Vec<TargetMeta>,
        attributes: Vec<AttributeMeta>,
        fits: Vec<LmeFit>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEnvelope {
    pub format_version: String,
    /// (attribute dimension, target count)
    pub dims: (usize, usize),
    #[serde(flatten)]
    pub model: ModelKind,
}

pub fn save_model(envelope: &ModelEnvelope, path: &Path) -> CliResult<()> {
    atomic_write(path, serde_json::to_string_pretty(envelope)?.as_bytes())
}

pub fn load_model(path: &Path) -> CliResult<ModelEnvelope> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let envelope: ModelEnvelope = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if envelope.format_version != FORMAT_VERSION {
        return Err(CliError::Input(format!(
            "{}: unsupported format version {:?}",
            path.display(),
            envelope.format_version
        )));
    }
    Ok(envelope)
}

// ---------------------------------------------------------------------------
// Forecast, report, and analysis CSVs
// ---------------------------------------------------------------------------

pub fn forecast_csv(
    rows: &[(String, &PosteriorForecast)],
    targets: &[TargetMeta],
) -> CliResult<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record([
            "subject_id",
            "target",
            "time",
            "mean",
            "stddev",
            "q05",
            "q50",
            "q95",
            "mode",
        ])
        .map_err(|e| CliError::Input(e.to_string()))?;
    for (subject_id, forecast) in rows {
        for (k, target) in targets.iter().enumerate() {
            for (ti, &time) in forecast.times.iter().enumerate() {
                let stat = &forecast.stats[k][ti];
                writer
                    .write_record([
                        subject_id.as_str(),
                        target.name.as_str(),
                        &format!("{time}"),
                        &format!("{}", stat.mean),
                        &format!("{}", stat.stddev),
                        &format!("{}", stat.q05),
                        &format!("{}", stat.q50),
                        &format!("{}", stat.q95),
                        &forecast.mode.to_string(),
                    ])
                    .map_err(|e| CliError::Input(e.to_string()))?;
            }
        }
    }
    writer
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))
}

pub fn report_csv(report: &EvalReport) -> CliResult<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record([
            "model",
            "target",
            "scenario",
            "point",
            "mae_mean",
            "mae_std",
            "n_subjects",
        ])
        .map_err(|e| CliError::Input(e.to_string()))?;
    for row in &report.rows {
        writer
            .write_record([
                row.model.as_str(),
                row.target.as_str(),
                row.scenario.as_str(),
                &row.point.to_string(),
                &row.mae_mean.map(|v| format!("{v}")).unwrap_or_default(),
                &row.mae_std.map(|v| format!("{v}")).unwrap_or_default(),
                &row.n_subjects.to_string(),
            ])
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    writer
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PvalueFile {
    pub format_version: String,
    pub reference: String,
    pub entries: Vec<sigtraj::evaluation::PairPvalue>,
}

pub fn density_csv(grid: &[f64], densities: &[Vec<f64>], targets: &[TargetMeta]) -> CliResult<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record(["target", "age", "density"])
        .map_err(|e| CliError::Input(e.to_string()))?;
    for (k, target) in targets.iter().enumerate() {
        for (i, &age) in grid.iter().enumerate() {
            writer
                .write_record([
                    target.name.as_str(),
                    &format!("{age}"),
                    &format!("{}", densities[k][i]),
                ])
                .map_err(|e| CliError::Input(e.to_string()))?;
        }
    }
    writer
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))
}

pub fn curves_csv(grid: &[f64], curves: &[Vec<f64>], targets: &[TargetMeta]) -> CliResult<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record(["target", "age", "latent"])
        .map_err(|e| CliError::Input(e.to_string()))?;
    for (k, target) in targets.iter().enumerate() {
        for (i, &age) in grid.iter().enumerate() {
            writer
                .write_record([
                    target.name.as_str(),
                    &format!("{age}"),
                    &format!("{}", curves[k][i]),
                ])
                .map_err(|e| CliError::Input(e.to_string()))?;
        }
    }
    writer
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))
}

pub fn risk_factors_csv(rows: &[RiskFactorRow]) -> CliResult<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record(["attribute", "delta_max_rate_per_year", "delta_inflection_years"])
        .map_err(|e| CliError::Input(e.to_string()))?;
    for row in rows {
        writer
            .write_record([
                row.attribute.as_str(),
                &format!("{}", row.delta_max_rate),
                &format!("{}", row.delta_inflection_years),
            ])
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    writer
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))
}

pub fn trajectories_csv(export: &TrajectoryExport) -> CliResult<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record(["subject_id", "condition", "target", "time", "mean", "stddev"])
        .map_err(|e| CliError::Input(e.to_string()))?;
    for point in &export.points {
        writer
            .write_record([
                point.subject_id.as_str(),
                point.condition.as_str(),
                point.target.as_str(),
                &format!("{}", point.time),
                &format!("{}", point.mean),
                &format!("{}", point.stddev),
            ])
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    writer
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))
}

pub fn trace_csv(trace: &[f64]) -> CliResult<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record(["iteration", "elbo_smoothed"])
        .map_err(|e| CliError::Input(e.to_string()))?;
    for (i, value) in trace.iter().enumerate() {
        writer
            .write_record([&i.to_string(), &format!("{value}")])
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    writer
        .into_inner()
        .map_err(|e| CliError::Input(e.to_string()))
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub unix_time_s: u64,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_hash: String) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_hash,
            inputs: Vec::new(),
            outputs: Vec::new(),
            unix_time_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    /// Outputs always land directly in the run's output directory, so only
    /// the file name is recorded; same-seed reruns into different
    /// directories then produce identical manifests (timestamps aside).
    pub fn output(mut self, path: &Path) -> Self {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.push(name);
        self
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        atomic_write(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }
}

/// Canonical JSON text of a configuration file (object keys sorted by the
/// JSON value representation), used for hashing.
pub fn canonical_config_text(path: Option<&Path>) -> CliResult<String> {
    match path {
        None => Ok("default".to_string()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            Ok(serde_json::to_string(&value)?)
        }
    }
}

//! On-disk formats.
//!
//! An observation set (an experience database or a set of recorded
//! executions) is a directory with a `manifest.json` and two CSV matrices per
//! execution, one row per sensor channel or function and one column per
//! timestep. Numbers are written with 17 significant digits so every value
//! reads back bit-identical. Models are single JSON files tagged with their
//! kind. A study ties a registry, skills, their databases, models and
//! recorded executions together under one `study.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{ExperienceDb, Fingerprint, FunctionRegistry, Observation, SensorSeries, SkillId};
use crate::error::{Error, Result};
use crate::fpf::{BlameConfig, FpfModel};
use crate::mom::{ErrorStats, MomConfig, MomDetector, MomModel, Normalizer, Tensor};
use crate::planner::{Execution, PlannerConfig, Skill, SkillExecutor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const STUDY_MANIFEST: &str = "study.json";

const KIND_DB: &str = "experience-db";
const KIND_RECORDINGS: &str = "recordings";

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Peeks at `kind` and `version` before the full parse, so a wrong file gives
/// a kind or version error rather than a field-level one.
fn check_header(path: &Path, value: &serde_json::Value, expected_kind: &str) -> Result<()> {
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::format(path, "missing `kind`"))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format(path, "missing `version`"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version.min(u64::from(u32::MAX)) as u32,
            expected: FORMAT_VERSION,
        });
    }
    if kind != expected_kind {
        return Err(Error::KindMismatch {
            path: path.to_path_buf(),
            expected: expected_kind.to_string(),
            found: kind.to_string(),
        });
    }
    Ok(())
}

fn read_tagged<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let value: serde_json::Value = read_json(path)?;
    check_header(path, &value, kind)?;
    serde_json::from_value(value).map_err(|e| Error::format(path, e))
}

/// Writes a matrix with a header of timestep indices and one labelled row each.
fn write_matrix(path: &Path, labels: &[String], m: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut header = vec!["row".to_string()];
    header.extend((0..m.ncols()).map(|t| t.to_string()));
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for (label, row) in labels.iter().zip(m.rows()) {
        let mut rec = Vec::with_capacity(m.ncols() + 1);
        rec.push(label.clone());
        rec.extend(row.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path, labels: &[String], cols: usize) -> Result<Array2<f64>> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let width = r.headers().map_err(|e| Error::format(path, e))?.len();
    if width != cols + 1 {
        return Err(Error::in_file(
            path,
            Error::DimensionMismatch {
                what: "timestep columns".into(),
                expected: cols,
                found: width.saturating_sub(1),
            },
        ));
    }
    let mut m = Array2::zeros((labels.len(), cols));
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        if i >= labels.len() {
            n = i + 1;
            continue;
        }
        if rec.get(0) != Some(labels[i].as_str()) {
            return Err(Error::format(
                path,
                format!(
                    "row {i} is labelled `{}`, expected `{}`",
                    rec.get(0).unwrap_or(""),
                    labels[i]
                ),
            ));
        }
        for (t, field) in rec.iter().skip(1).enumerate() {
            m[[i, t]] = field
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::format(path, format!("row {i}, column {t}: {e}")))?;
        }
        n = i + 1;
    }
    if n != labels.len() {
        return Err(Error::in_file(
            path,
            Error::DimensionMismatch {
                what: "matrix rows".into(),
                expected: labels.len(),
                found: n,
            },
        ));
    }
    Ok(m)
}

fn channel_labels(d: usize) -> Vec<String> {
    (0..d).map(|c| format!("ch{c}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordEntry {
    sensors: String,
    fingerprint: String,
    timesteps: usize,
    sensor_dt: f64,
    fingerprint_dt: f64,
    success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_t_fail: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordManifest {
    kind: String,
    version: u32,
    skill: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    canonical_t: Option<usize>,
    channels: usize,
    functions: Vec<String>,
    records: Vec<RecordEntry>,
}

fn save_records(
    dir: &Path,
    kind: &str,
    skill: SkillId,
    canonical_t: Option<usize>,
    executions: &[(&Observation, Option<usize>)],
    registry: &FunctionRegistry,
) -> Result<()> {
    create_dir(dir)?;
    let channels = executions.first().map_or(1, |(o, _)| o.sensors.dims());
    let names = registry.names().to_vec();
    let mut records = Vec::with_capacity(executions.len());
    for (i, (obs, true_t_fail)) in executions.iter().enumerate() {
        let sensors = format!("obs_{i:04}_sensors.csv");
        let fingerprint = format!("obs_{i:04}_fingerprint.csv");
        write_matrix(
            &dir.join(&sensors),
            &channel_labels(obs.sensors.dims()),
            obs.sensors.data(),
        )?;
        write_matrix(&dir.join(&fingerprint), &names, obs.fingerprint.counts())?;
        records.push(RecordEntry {
            sensors,
            fingerprint,
            timesteps: obs.len(),
            sensor_dt: obs.sensors.dt(),
            fingerprint_dt: obs.fingerprint.dt(),
            success: obs.success,
            true_t_fail: *true_t_fail,
        });
    }
    let manifest = RecordManifest {
        kind: kind.into(),
        version: FORMAT_VERSION,
        skill: skill.0,
        canonical_t,
        channels,
        functions: names,
        records,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

fn load_records(dir: &Path, kind: &str) -> Result<(RecordManifest, FunctionRegistry, Vec<Execution>)> {
    let path = dir.join(MANIFEST);
    let manifest: RecordManifest = read_tagged(&path, kind)?;
    let registry = FunctionRegistry::new(manifest.functions.iter().cloned()).map_err(|e| Error::in_file(&path, e))?;
    let channels = channel_labels(manifest.channels);
    let mut out = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let sp = dir.join(&rec.sensors);
        let fp = dir.join(&rec.fingerprint);
        let sensors = SensorSeries::new(read_matrix(&sp, &channels, rec.timesteps)?, rec.sensor_dt)
            .map_err(|e| Error::in_file(&sp, e))?;
        let fingerprint = Fingerprint::new(read_matrix(&fp, registry.names(), rec.timesteps)?, rec.fingerprint_dt)
            .map_err(|e| Error::in_file(&fp, e))?;
        let observation = Observation {
            skill: SkillId(manifest.skill),
            sensors,
            fingerprint,
            success: rec.success,
        };
        out.push(Execution {
            observation,
            true_t_fail: rec.true_t_fail,
        });
    }
    Ok((manifest, registry, out))
}

pub fn save_db(db: &ExperienceDb, registry: &FunctionRegistry, dir: &Path) -> Result<()> {
    let pairs: Vec<_> = db.observations().iter().map(|o| (o, None)).collect();
    save_records(dir, KIND_DB, db.skill(), Some(db.canonical_t()), &pairs, registry)
}

/// Loads and re-validates an experience database and the registry it was saved with.
pub fn load_db(dir: &Path) -> Result<(FunctionRegistry, ExperienceDb)> {
    let (manifest, registry, execs) = load_records(dir, KIND_DB)?;
    let path = dir.join(MANIFEST);
    let t = manifest
        .canonical_t
        .ok_or_else(|| Error::format(&path, "missing `canonical_t`"))?;
    let obs = execs.into_iter().map(|e| e.observation).collect();
    let db =
        ExperienceDb::with_length(SkillId(manifest.skill), t, obs, &registry).map_err(|e| Error::in_file(&path, e))?;
    if db.observations().iter().any(|o| o.len() != t) {
        return Err(Error::format(
            &path,
            "stored observation length differs from `canonical_t`",
        ));
    }
    Ok((registry, db))
}

/// Recorded executions of one skill, successful or not.
pub fn save_recordings(
    dir: &Path,
    skill: SkillId,
    executions: &[Execution],
    registry: &FunctionRegistry,
) -> Result<()> {
    let pairs: Vec<_> = executions.iter().map(|e| (&e.observation, e.true_t_fail)).collect();
    save_records(dir, KIND_RECORDINGS, skill, None, &pairs, registry)
}

pub fn load_recordings(dir: &Path) -> Result<(FunctionRegistry, Vec<Execution>)> {
    let (_, registry, execs) = load_records(dir, KIND_RECORDINGS)?;
    let path = dir.join(MANIFEST);
    for e in &execs {
        crate::domain::validate_observation(e.observation.clone(), &registry)
            .map_err(|err| Error::in_file(&path, err))?;
    }
    Ok((registry, execs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mom,
    Fpf,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Mom => "mom",
            ModelKind::Fpf => "fpf",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomFile {
    kind: String,
    version: u32,
    input_dim: usize,
    bottleneck: usize,
    timesteps: usize,
    /// Tensor name to row-major values.
    tensors: BTreeMap<String, Vec<f64>>,
    normalizer: Normalizer,
    error_stats: ErrorStats,
    config: MomConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FpfFile {
    kind: String,
    version: u32,
    functions: usize,
    timesteps: usize,
    n_samples: usize,
    var_floor: f64,
    mean: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Mom(MomDetector),
    Fpf(FpfModel),
}

impl StoredModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            StoredModel::Mom(_) => ModelKind::Mom,
            StoredModel::Fpf(_) => ModelKind::Fpf,
        }
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(path: &Path, what: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<Array2<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::in_file(
            path,
            Error::DimensionMismatch {
                what: format!("{what} matrix"),
                expected: shape.0 * shape.1,
                found: rows.iter().map(Vec::len).sum(),
            },
        ));
    }
    Ok(Array2::from_shape_fn(shape, |(i, j)| rows[i][j]))
}

pub fn save_model(path: &Path, model: &StoredModel) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    match model {
        StoredModel::Mom(det) => {
            let m = &det.model;
            let tensors = Tensor::ALL
                .iter()
                .map(|&t| (t.name().to_string(), m.tensor(t).to_vec()))
                .collect();
            write_json(
                path,
                &MomFile {
                    kind: ModelKind::Mom.tag().into(),
                    version: FORMAT_VERSION,
                    input_dim: m.input_dim(),
                    bottleneck: m.bottleneck(),
                    timesteps: det.stats.len(),
                    tensors,
                    normalizer: det.normalizer.clone(),
                    error_stats: det.stats.clone(),
                    config: det.config,
                },
            )
        }
        StoredModel::Fpf(f) => write_json(
            path,
            &FpfFile {
                kind: ModelKind::Fpf.tag().into(),
                version: FORMAT_VERSION,
                functions: f.functions(),
                timesteps: f.len(),
                n_samples: f.n_samples(),
                var_floor: f.var_floor(),
                mean: rows(f.mean()),
                var: rows(f.var()),
            },
        ),
    }
}

fn load_mom_file(path: &Path, file: MomFile) -> Result<MomDetector> {
    let (d, b) = (file.input_dim, file.bottleneck);
    let mut params = Vec::new();
    for t in Tensor::ALL {
        let values = file
            .tensors
            .get(t.name())
            .ok_or_else(|| Error::format(path, format!("missing tensor `{}`", t.name())))?;
        let (r, c) = t.shape(d, b);
        if values.len() != r * c {
            return Err(Error::in_file(
                path,
                Error::DimensionMismatch {
                    what: format!("tensor `{}`", t.name()),
                    expected: r * c,
                    found: values.len(),
                },
            ));
        }
        params.extend_from_slice(values);
    }
    if file.tensors.len() != Tensor::ALL.len() {
        return Err(Error::format(path, "unexpected tensors in model file"));
    }
    let model = MomModel::from_params(d, b, params).map_err(|e| Error::in_file(path, e))?;
    let check = |what: &str, expected: usize, found: usize| {
        if expected == found {
            Ok(())
        } else {
            Err(Error::in_file(
                path,
                Error::DimensionMismatch {
                    what: what.into(),
                    expected,
                    found,
                },
            ))
        }
    };
    check("normalizer minima", d, file.normalizer.min.len())?;
    check("normalizer maxima", d, file.normalizer.max.len())?;
    check("error mean length", file.timesteps, file.error_stats.mu.len())?;
    check("error sigma length", file.timesteps, file.error_stats.sigma.len())?;
    if file.error_stats.sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::format(path, "error sigma must be positive"));
    }
    file.config.validate().map_err(|e| Error::in_file(path, e))?;
    Ok(MomDetector {
        normalizer: file.normalizer,
        model,
        stats: file.error_stats,
        config: file.config,
    })
}

fn load_fpf_file(path: &Path, file: FpfFile) -> Result<FpfModel> {
    let shape = (file.functions, file.timesteps);
    let mean = from_rows(path, "mean", &file.mean, shape)?;
    let var = from_rows(path, "variance", &file.var, shape)?;
    FpfModel::from_parts(mean, var, file.n_samples, file.var_floor).map_err(|e| Error::in_file(path, e))
}

/// Loads either model kind, dispatching on the file's tag.
pub fn load_model(path: &Path) -> Result<StoredModel> {
    let value: serde_json::Value = read_json(path)?;
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or_default()
        .to_string();
    match kind.as_str() {
        "mom" => load_mom(path).map(StoredModel::Mom),
        "fpf" => load_fpf(path).map(StoredModel::Fpf),
        other => Err(Error::format(path, format!("unknown model kind `{other}`"))),
    }
}

pub fn load_mom(path: &Path) -> Result<MomDetector> {
    let file = read_tagged(path, ModelKind::Mom.tag())?;
    load_mom_file(path, file)
}

pub fn load_fpf(path: &Path) -> Result<FpfModel> {
    let file = read_tagged(path, ModelKind::Fpf.tag())?;
    load_fpf_file(path, file)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StudySkillEntry {
    name: String,
    db: String,
    fpf: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mom: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recordings: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StudyManifest {
    kind: String,
    version: u32,
    functions: Vec<String>,
    blame: BlameConfig,
    planner: PlannerConfig,
    skills: Vec<StudySkillEntry>,
}

/// Skills with their models, plus recorded executions for replay.
#[derive(Debug, Clone)]
pub struct Study {
    pub registry: FunctionRegistry,
    pub skills: Vec<Skill>,
    /// Per skill, in skill order; may be empty for skills never recorded.
    pub recordings: Vec<Vec<Execution>>,
    pub blame: BlameConfig,
    pub planner: PlannerConfig,
}

pub fn save_study(dir: &Path, study: &Study) -> Result<()> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(study.skills.len());
    for (i, skill) in study.skills.iter().enumerate() {
        let stem = format!("{:02}_{}", i, sanitize(&skill.name));
        let entry = StudySkillEntry {
            name: skill.name.clone(),
            db: format!("dbs/{stem}"),
            fpf: format!("models/{stem}.fpf.json"),
            mom: skill.detector.as_ref().map(|_| format!("models/{stem}.mom.json")),
            recordings: study
                .recordings
                .get(i)
                .filter(|r| !r.is_empty())
                .map(|_| format!("recordings/{stem}")),
        };
        save_db(&skill.db, &study.registry, &dir.join(&entry.db))?;
        save_model(&dir.join(&entry.fpf), &StoredModel::Fpf(skill.fpf.clone()))?;
        if let (Some(p), Some(det)) = (&entry.mom, &skill.detector) {
            save_model(&dir.join(p), &StoredModel::Mom(det.clone()))?;
        }
        if let Some(p) = &entry.recordings {
            save_recordings(&dir.join(p), skill.id(), &study.recordings[i], &study.registry)?;
        }
        entries.push(entry);
    }
    write_json(
        &dir.join(STUDY_MANIFEST),
        &StudyManifest {
            kind: "study".into(),
            version: FORMAT_VERSION,
            functions: study.registry.names().to_vec(),
            blame: study.blame,
            planner: study.planner,
            skills: entries,
        },
    )
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn load_study(dir: &Path) -> Result<Study> {
    let path = dir.join(STUDY_MANIFEST);
    let manifest: StudyManifest = read_tagged(&path, "study")?;
    let registry = FunctionRegistry::new(manifest.functions.iter().cloned()).map_err(|e| Error::in_file(&path, e))?;
    manifest.blame.validate().map_err(|e| Error::in_file(&path, e))?;
    manifest.planner.validate().map_err(|e| Error::in_file(&path, e))?;
    let mut skills = Vec::with_capacity(manifest.skills.len());
    let mut recordings = Vec::with_capacity(manifest.skills.len());
    for (i, entry) in manifest.skills.iter().enumerate() {
        let db_dir: PathBuf = dir.join(&entry.db);
        let (db_registry, db) = load_db(&db_dir)?;
        if db_registry != registry {
            return Err(Error::format(
                db_dir.join(MANIFEST),
                "function list differs from the study's",
            ));
        }
        if db.skill() != SkillId(i) {
            return Err(Error::format(
                db_dir.join(MANIFEST),
                format!("database belongs to skill {} but is listed at position {i}", db.skill()),
            ));
        }
        let fpf_path = dir.join(&entry.fpf);
        let fpf = load_fpf(&fpf_path)?;
        if fpf.functions() != registry.len() || fpf.len() != db.canonical_t() {
            return Err(Error::format(&fpf_path, "model shape does not match its database"));
        }
        let detector = entry.mom.as_ref().map(|p| load_mom(&dir.join(p))).transpose()?;
        let recorded = match &entry.recordings {
            Some(p) => {
                let rdir = dir.join(p);
                let (rreg, execs) = load_recordings(&rdir)?;
                if rreg != registry {
                    return Err(Error::format(
                        rdir.join(MANIFEST),
                        "function list differs from the study's",
                    ));
                }
                execs
            }
            None => Vec::new(),
        };
        skills.push(Skill {
            name: entry.name.clone(),
            db,
            fpf,
            detector,
        });
        recordings.push(recorded);
    }
    Ok(Study {
        registry,
        skills,
        recordings,
        blame: manifest.blame,
        planner: manifest.planner,
    })
}

/// Plays back recorded executions, cycling through each skill's recordings.
#[derive(Debug, Clone)]
pub struct ReplayExecutor {
    recordings: Vec<Vec<Execution>>,
    cursor: Vec<usize>,
}

impl ReplayExecutor {
    pub fn new(recordings: Vec<Vec<Execution>>) -> Self {
        let cursor = vec![0; recordings.len()];
        Self { recordings, cursor }
    }
}

impl SkillExecutor for ReplayExecutor {
    fn execute(&mut self, skill: SkillId) -> Result<Execution> {
        let pool = self
            .recordings
            .get(skill.0)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Executor(format!("no recorded executions for {skill}")))?;
        let i = self.cursor[skill.0];
        self.cursor[skill.0] = (i + 1) % pool.len();
        Ok(pool[i].clone())
    }
}

//! Gait dataset ingestion, training-state construction and EMG effort processing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{DVector, Vector5};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::DataError;
use crate::model::{Biped, GenCoord, State};

/// Locomotion task of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskLabel {
    Lg1_0,
    Lg1_45,
    Ra5_2,
    Ra11,
    Rd5_2,
    Rd11,
    Sa,
    Sd,
}

impl TaskLabel {
    pub const ALL: [TaskLabel; 8] = [
        TaskLabel::Lg1_0,
        TaskLabel::Lg1_45,
        TaskLabel::Ra5_2,
        TaskLabel::Ra11,
        TaskLabel::Rd5_2,
        TaskLabel::Rd11,
        TaskLabel::Sa,
        TaskLabel::Sd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskLabel::Lg1_0 => "LG_1_0",
            TaskLabel::Lg1_45 => "LG_1_45",
            TaskLabel::Ra5_2 => "RA_5_2",
            TaskLabel::Ra11 => "RA_11",
            TaskLabel::Rd5_2 => "RD_5_2",
            TaskLabel::Rd11 => "RD_11",
            TaskLabel::Sa => "SA",
            TaskLabel::Sd => "SD",
        }
    }

    /// Human-readable name as used in report tables, e.g. `LG 1.45`.
    pub fn display_name(self) -> &'static str {
        match self {
            TaskLabel::Lg1_0 => "LG 1.0",
            TaskLabel::Lg1_45 => "LG 1.45",
            TaskLabel::Ra5_2 => "RA 5.2",
            TaskLabel::Ra11 => "RA 11",
            TaskLabel::Rd5_2 => "RD 5.2",
            TaskLabel::Rd11 => "RD 11",
            TaskLabel::Sa => "SA",
            TaskLabel::Sd => "SD",
        }
    }
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskLabel {
    type Err = DataError;

    /// Accepts canonical labels (`LG_1_45`) and table names (`LG 1.45`, `LG 1.4`).
    fn from_str(s: &str) -> Result<Self, DataError> {
        let key: String = s
            .trim()
            .to_ascii_uppercase()
            .chars()
            .map(|c| if c == ' ' || c == '.' || c == '-' { '_' } else { c })
            .collect();
        let task = match key.as_str() {
            "LG_1_0" | "LG_1" => TaskLabel::Lg1_0,
            "LG_1_45" | "LG_1_4" => TaskLabel::Lg1_45,
            "RA_5_2" => TaskLabel::Ra5_2,
            "RA_11" => TaskLabel::Ra11,
            "RD_5_2" => TaskLabel::Rd5_2,
            "RD_11" => TaskLabel::Rd11,
            "SA" => TaskLabel::Sa,
            "SD" => TaskLabel::Sd,
            _ => return Err(DataError::UnknownTask(s.to_string())),
        };
        Ok(task)
    }
}

impl TryFrom<String> for TaskLabel {
    type Error = DataError;
    fn try_from(s: String) -> Result<Self, DataError> {
        s.parse()
    }
}

impl From<TaskLabel> for String {
    fn from(t: TaskLabel) -> String {
        t.as_str().to_string()
    }
}

/// One phase-normalized stride. Angles in rad, torques in Nm/kg.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitTrial {
    pub subject_id: String,
    pub task: TaskLabel,
    pub stride: usize,
    /// Percent of gait cycle, 0 to 100.
    pub phase: Vec<f64>,
    pub theta_l: Vec<f64>,
    pub theta_r: Vec<f64>,
    pub phi: Vec<f64>,
    /// Cycle duration in seconds.
    pub cycle_duration: Option<f64>,
    pub torque_l: Vec<f64>,
    pub torque_r: Vec<f64>,
    pub body_mass: f64,
}

impl GaitTrial {
    pub fn len(&self) -> usize {
        self.phase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phase.is_empty()
    }

    fn label(&self) -> String {
        format!("{}/{}/{}", self.subject_id, self.task, self.stride)
    }

    fn series(&self) -> [&Vec<f64>; 6] {
        [&self.phase, &self.theta_l, &self.theta_r, &self.phi, &self.torque_l, &self.torque_r]
    }

    pub fn has_nan(&self) -> bool {
        self.series().iter().any(|s| s.iter().any(|x| x.is_nan()))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidTrial(format!("{}: {msg}", self.label())));
        let n = self.len();
        if n < 2 {
            return bad(format!("needs at least 2 samples, got {n}"));
        }
        if self.series().iter().any(|s| s.len() != n) {
            return bad("series lengths differ".into());
        }
        if self.series().iter().any(|s| s.iter().any(|x| !x.is_finite())) {
            return bad("non-finite sample".into());
        }
        if self.phase.windows(2).any(|w| w[1] <= w[0]) {
            return bad("phase must be strictly increasing".into());
        }
        if self.phase[0].abs() > 1e-9 || (self.phase[n - 1] - 100.0).abs() > 1e-9 {
            return bad(format!("phase must span 0 to 100, got {} to {}", self.phase[0], self.phase[n - 1]));
        }
        if !(self.body_mass > 0.0 && self.body_mass.is_finite()) {
            return bad(format!("body mass must be positive, got {}", self.body_mass));
        }
        if let Some(d) = self.cycle_duration {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("cycle duration must be positive, got {d}"));
            }
        }
        Ok(())
    }
}

/// Immutable collection of validated trials.
#[derive(Debug, Clone, Default)]
pub struct GaitDataset {
    trials: Vec<GaitTrial>,
    dropped_strides: usize,
}

impl GaitDataset {
    pub fn new(trials: Vec<GaitTrial>) -> Result<Self, DataError> {
        Self::with_dropped(trials, 0)
    }

    fn with_dropped(mut trials: Vec<GaitTrial>, dropped_strides: usize) -> Result<Self, DataError> {
        if trials.is_empty() {
            return Err(DataError::Empty);
        }
        for t in &trials {
            t.validate()?;
        }
        trials.sort_by(|a, b| (&a.subject_id, a.task, a.stride).cmp(&(&b.subject_id, b.task, b.stride)));
        Ok(GaitDataset { trials, dropped_strides })
    }

    pub fn trials(&self) -> &[GaitTrial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Strides discarded during cleaning.
    pub fn dropped_strides(&self) -> usize {
        self.dropped_strides
    }

    pub fn subjects(&self) -> Vec<String> {
        self.trials.iter().map(|t| t.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn tasks(&self) -> Vec<TaskLabel> {
        self.trials.iter().map(|t| t.task).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Trials grouped by `(subject, task)`.
    pub fn groups(&self) -> BTreeMap<(String, TaskLabel), Vec<&GaitTrial>> {
        let mut out: BTreeMap<(String, TaskLabel), Vec<&GaitTrial>> = BTreeMap::new();
        for t in &self.trials {
            out.entry((t.subject_id.clone(), t.task)).or_default().push(t);
        }
        out
    }

    pub fn trials_for<'a>(&'a self, subject: &'a str, task: TaskLabel) -> impl Iterator<Item = &'a GaitTrial> + 'a {
        self.trials.iter().filter(move |t| t.subject_id == subject && t.task == task)
    }

    /// Trials whose subject satisfies `keep`; `None` if nothing remains.
    pub fn filter_subjects(&self, keep: impl Fn(&str) -> bool) -> Option<GaitDataset> {
        let trials: Vec<_> = self.trials.iter().filter(|t| keep(&t.subject_id)).cloned().collect();
        (!trials.is_empty()).then_some(GaitDataset { trials, dropped_strides: 0 })
    }

    pub fn map_trials(&self, f: impl Fn(&GaitTrial) -> Result<GaitTrial, DataError>) -> Result<GaitDataset, DataError> {
        let trials = self.trials.iter().map(f).collect::<Result<Vec<_>, _>>()?;
        Self::with_dropped(trials, self.dropped_strides)
    }
}

/// Unit of angle columns in input files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    Deg,
    Rad,
}

impl AngleUnit {
    fn to_rad(self, x: f64) -> f64 {
        match self {
            AngleUnit::Deg => x.to_radians(),
            AngleUnit::Rad => x,
        }
    }

    fn from_rad(self, x: f64) -> f64 {
        match self {
            AngleUnit::Deg => x.to_degrees(),
            AngleUnit::Rad => x,
        }
    }
}

/// Column names in per-subject CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    /// Subject column; when absent the file stem is the subject id.
    pub subject: Option<String>,
    pub task: String,
    /// Stride column; when absent strides are split where phase restarts.
    pub stride: Option<String>,
    pub phase: String,
    pub theta_l: String,
    pub theta_r: String,
    /// Global stance-thigh angle.
    pub phi: String,
    pub torque_l: String,
    pub torque_r: String,
    pub body_mass: String,
    pub cycle_duration: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            subject: None,
            task: "task".into(),
            stride: Some("stride".into()),
            phase: "phase".into(),
            theta_l: "hip_angle_l".into(),
            theta_r: "hip_angle_r".into(),
            phi: "thigh_angle".into(),
            torque_l: "hip_torque_l".into(),
            torque_r: "hip_torque_r".into(),
            body_mass: "body_mass".into(),
            cycle_duration: Some("cycle_duration".into()),
        }
    }
}

/// Sidecar describing units and column names (`schema.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    /// `"deg"` or `"rad"`.
    pub angle_unit: String,
    #[serde(default)]
    pub columns: ColumnMap,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig { angle_unit: "deg".into(), columns: ColumnMap::default() }
    }
}

impl SchemaConfig {
    pub const FILE_NAME: &'static str = "schema.json";

    pub fn unit(&self) -> Result<AngleUnit, DataError> {
        match self.angle_unit.trim().to_ascii_lowercase().as_str() {
            "deg" | "degree" | "degrees" => Ok(AngleUnit::Deg),
            "rad" | "radian" | "radians" => Ok(AngleUnit::Rad),
            other => Err(DataError::UnitMismatch(format!("unknown angle unit `{other}`"))),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        read_json(path)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.display().to_string(), source })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |source| DataError::Csv { path: path.display().to_string(), source }
}

fn parse_value(field: &str, path: &Path, line: u64) -> Result<f64, DataError> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") || f.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    f.parse::<f64>().map_err(|e| DataError::InvalidValue {
        path: path.display().to_string(),
        line,
        msg: format!("`{f}`: {e}"),
    })
}

struct Parsed {
    trials: Vec<GaitTrial>,
    dropped: usize,
}

fn unit_suffix_conflicts(header: &str, unit: AngleUnit) -> bool {
    let h = header.to_ascii_lowercase();
    match unit {
        AngleUnit::Rad => h.ends_with("_deg") || h.ends_with("(deg)"),
        AngleUnit::Deg => h.ends_with("_rad") || h.ends_with("(rad)"),
    }
}

fn parse_file(path: &Path, schema: &SchemaConfig) -> Result<Parsed, DataError> {
    let unit = schema.unit()?;
    let cols = &schema.columns;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err(path))?;
    let headers = reader.headers().map_err(csv_err(path))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| DataError::MissingColumn { path: path.display().to_string(), column: name.to_string() })
    };
    for name in [&cols.theta_l, &cols.theta_r, &cols.phi] {
        if unit_suffix_conflicts(name, unit) {
            return Err(DataError::UnitMismatch(format!(
                "{}: column `{name}` conflicts with angle unit `{}`",
                path.display(),
                schema.angle_unit
            )));
        }
    }
    let i_task = require(&cols.task)?;
    let i_phase = require(&cols.phase)?;
    let i_angles = [require(&cols.theta_l)?, require(&cols.theta_r)?, require(&cols.phi)?];
    let i_torques = [require(&cols.torque_l)?, require(&cols.torque_r)?];
    let i_mass = require(&cols.body_mass)?;
    let i_subject = cols.subject.as_deref().map(require).transpose()?;
    let i_stride = cols.stride.as_deref().and_then(find);
    let i_duration = cols.cycle_duration.as_deref().and_then(find);
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();

    // Rows in file order, grouped into strides.
    let mut groups: Vec<((String, TaskLabel, usize), GaitTrial)> = Vec::new();
    let mut auto_stride = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let line = row as u64 + 2;
        let get = |i: usize| parse_value(record.get(i).unwrap_or(""), path, line);
        let subject = match i_subject {
            Some(i) => record.get(i).unwrap_or("").to_string(),
            None => stem.clone(),
        };
        let task: TaskLabel = record.get(i_task).unwrap_or("").parse()?;
        let phase = get(i_phase)?;
        let stride = match i_stride {
            Some(i) => {
                let s = get(i)?;
                if !(s >= 0.0 && s.fract() == 0.0) {
                    return Err(DataError::InvalidValue {
                        path: path.display().to_string(),
                        line,
                        msg: format!("stride index must be a non-negative integer, got {s}"),
                    });
                }
                s as usize
            }
            None => {
                let restart = match groups.last() {
                    Some(((s, t, _), g)) => *s != subject || *t != task || g.phase.last().is_some_and(|&p| phase <= p),
                    None => false,
                };
                if restart {
                    auto_stride += 1;
                }
                auto_stride
            }
        };
        let key = (subject, task, stride);
        let start_new = groups.last().is_none_or(|(k, _)| *k != key);
        if start_new {
            groups.push((
                key.clone(),
                GaitTrial {
                    subject_id: key.0.clone(),
                    task,
                    stride,
                    phase: Vec::new(),
                    theta_l: Vec::new(),
                    theta_r: Vec::new(),
                    phi: Vec::new(),
                    cycle_duration: None,
                    torque_l: Vec::new(),
                    torque_r: Vec::new(),
                    body_mass: f64::NAN,
                },
            ));
        }
        let trial = &mut groups.last_mut().expect("group").1;
        let angles = [get(i_angles[0])?, get(i_angles[1])?, get(i_angles[2])?];
        if unit == AngleUnit::Rad && angles.iter().any(|a| a.abs() > 2.0 * std::f64::consts::PI) {
            return Err(DataError::UnitMismatch(format!(
                "{} line {line}: angle exceeds 2π while the schema declares radians",
                path.display()
            )));
        }
        trial.phase.push(phase);
        trial.theta_l.push(unit.to_rad(angles[0]));
        trial.theta_r.push(unit.to_rad(angles[1]));
        trial.phi.push(unit.to_rad(angles[2]));
        trial.torque_l.push(get(i_torques[0])?);
        trial.torque_r.push(get(i_torques[1])?);
        if trial.body_mass.is_nan() {
            trial.body_mass = get(i_mass)?;
        }
        if trial.cycle_duration.is_none() {
            if let Some(i) = i_duration {
                let d = get(i)?;
                trial.cycle_duration = (!d.is_nan()).then_some(d);
            }
        }
    }

    let mut merged: BTreeMap<(String, TaskLabel, usize), GaitTrial> = BTreeMap::new();
    for (key, trial) in groups {
        if merged.insert(key.clone(), trial).is_some() {
            return Err(DataError::InvalidTrial(format!(
                "{}: stride {}/{}/{} is not contiguous",
                path.display(),
                key.0,
                key.1,
                key.2
            )));
        }
    }
    let mut trials = Vec::new();
    let mut dropped = 0;
    for (_, trial) in merged {
        if trial.has_nan() || trial.body_mass.is_nan() {
            dropped += 1;
            continue;
        }
        trial.validate()?;
        trials.push(trial);
    }
    Ok(Parsed { trials, dropped })
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every `*.csv` in `dir` using `schema`.
///
/// Strides containing NaN are dropped and counted.
pub fn load_dataset(dir: &Path, schema: &SchemaConfig) -> Result<GaitDataset, DataError> {
    schema.unit()?;
    let files = csv_files(dir)?;
    if files.is_empty() {
        return Err(DataError::Empty);
    }
    let parsed = files.par_iter().map(|f| parse_file(f, schema)).collect::<Result<Vec<_>, _>>()?;
    let dropped: usize = parsed.iter().map(|p| p.dropped).sum();
    let trials: Vec<GaitTrial> = parsed.into_iter().flat_map(|p| p.trials).collect();
    if dropped > 0 {
        warn!("dropped {dropped} stride(s) containing NaN samples");
    }
    info!("loaded {} strides from {} file(s)", trials.len(), files.len());
    GaitDataset::with_dropped(trials, dropped)
}

/// Loads `dir` with its `schema.json` sidecar, or the default schema if none exists.
pub fn load_dataset_dir(dir: &Path) -> Result<GaitDataset, DataError> {
    let sidecar = dir.join(SchemaConfig::FILE_NAME);
    let schema = if sidecar.exists() { SchemaConfig::from_path(&sidecar)? } else { SchemaConfig::default() };
    load_dataset(dir, &schema)
}

/// Writes one CSV per subject plus `schema.json`, in the given angle unit.
pub fn write_dataset_dir(dataset: &GaitDataset, dir: &Path, unit: AngleUnit) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let schema = SchemaConfig {
        angle_unit: match unit {
            AngleUnit::Deg => "deg".into(),
            AngleUnit::Rad => "rad".into(),
        },
        columns: ColumnMap::default(),
    };
    let sidecar = dir.join(SchemaConfig::FILE_NAME);
    let text = serde_json::to_string_pretty(&schema).expect("schema serializes");
    fs::write(&sidecar, text).map_err(io_err(&sidecar))?;
    for subject in dataset.subjects() {
        let path = dir.join(format!("{subject}.csv"));
        let trials: Vec<&GaitTrial> = dataset.trials().iter().filter(|t| t.subject_id == subject).collect();
        write_trials_csv(&path, &trials, &schema.columns, unit, false)?;
    }
    Ok(())
}

fn write_trials_csv(
    path: &Path,
    trials: &[&GaitTrial],
    cols: &ColumnMap,
    unit: AngleUnit,
    with_subject: bool,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<&str> = Vec::new();
    if with_subject {
        header.push(cols.subject.as_deref().unwrap_or("subject"));
    }
    header.extend([
        cols.task.as_str(),
        cols.stride.as_deref().unwrap_or("stride"),
        cols.phase.as_str(),
        cols.theta_l.as_str(),
        cols.theta_r.as_str(),
        cols.phi.as_str(),
        cols.torque_l.as_str(),
        cols.torque_r.as_str(),
        cols.body_mass.as_str(),
        cols.cycle_duration.as_deref().unwrap_or("cycle_duration"),
    ]);
    w.write_record(&header).map_err(csv_err(path))?;
    for t in trials {
        for i in 0..t.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if with_subject {
                rec.push(t.subject_id.clone());
            }
            rec.push(t.task.to_string());
            rec.push(t.stride.to_string());
            for x in [
                t.phase[i],
                unit.from_rad(t.theta_l[i]),
                unit.from_rad(t.theta_r[i]),
                unit.from_rad(t.phi[i]),
                t.torque_l[i],
                t.torque_r[i],
                t.body_mass,
            ] {
                rec.push(format!("{x:e}"));
            }
            rec.push(t.cycle_duration.map(|d| format!("{d:e}")).unwrap_or_default());
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Manifest describing a canonical dataset cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format_version: u32,
    pub data_file: String,
    pub angle_unit: AngleUnit,
    pub trials: usize,
    pub subjects: Vec<String>,
    pub tasks: Vec<TaskLabel>,
    pub dropped_strides: usize,
}

impl CacheManifest {
    pub const FILE_NAME: &'static str = "manifest.json";
    const DATA_FILE: &'static str = "dataset.csv";
}

/// Writes the canonical cache: one CSV (radians, subject column) plus `manifest.json`.
pub fn write_cache(dataset: &GaitDataset, dir: &Path) -> Result<CacheManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cols = ColumnMap { subject: Some("subject".into()), ..ColumnMap::default() };
    let data = dir.join(CacheManifest::DATA_FILE);
    let trials: Vec<&GaitTrial> = dataset.trials().iter().collect();
    write_trials_csv(&data, &trials, &cols, AngleUnit::Rad, true)?;
    let manifest = CacheManifest {
        format_version: 1,
        data_file: CacheManifest::DATA_FILE.into(),
        angle_unit: AngleUnit::Rad,
        trials: dataset.len(),
        subjects: dataset.subjects(),
        tasks: dataset.tasks(),
        dropped_strides: dataset.dropped_strides(),
    };
    let path = dir.join(CacheManifest::FILE_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_cache(dir: &Path) -> Result<GaitDataset, DataError> {
    let manifest: CacheManifest = read_json(&dir.join(CacheManifest::FILE_NAME))?;
    let schema = SchemaConfig {
        angle_unit: "rad".into(),
        columns: ColumnMap { subject: Some("subject".into()), ..ColumnMap::default() },
    };
    let data = dir.join(&manifest.data_file);
    let parsed = parse_file(&data, &schema)?;
    let ds = GaitDataset::with_dropped(parsed.trials, manifest.dropped_strides)?;
    if ds.len() != manifest.trials {
        return Err(DataError::InvalidTrial(format!(
            "cache holds {} strides, manifest lists {}",
            ds.len(),
            manifest.trials
        )));
    }
    Ok(ds)
}

/// Linear interpolation of `(x, y)` at `at`; `x` strictly increasing.
pub fn interp_linear(x: &[f64], y: &[f64], at: f64) -> f64 {
    let n = x.len();
    if at <= x[0] {
        return y[0];
    }
    if at >= x[n - 1] {
        return y[n - 1];
    }
    let j = x.partition_point(|&v| v <= at).clamp(1, n - 1);
    let (x0, x1) = (x[j - 1], x[j]);
    let w = (at - x0) / (x1 - x0);
    y[j - 1] + w * (y[j] - y[j - 1])
}

pub fn uniform_phase(n: usize) -> Vec<f64> {
    (0..n).map(|i| 100.0 * i as f64 / (n - 1) as f64).collect()
}

pub const DEFAULT_CYCLE_POINTS: usize = 150;

/// Resamples every series onto a uniform `n`-point phase grid.
pub fn resample_cycle(trial: &GaitTrial, n: usize) -> GaitTrial {
    assert!(n >= 2, "resample_cycle needs n >= 2");
    let grid = uniform_phase(n);
    let re = |y: &[f64]| grid.iter().map(|&p| interp_linear(&trial.phase, y, p)).collect::<Vec<_>>();
    GaitTrial {
        subject_id: trial.subject_id.clone(),
        task: trial.task,
        stride: trial.stride,
        theta_l: re(&trial.theta_l),
        theta_r: re(&trial.theta_r),
        phi: re(&trial.phi),
        torque_l: re(&trial.torque_l),
        torque_r: re(&trial.torque_r),
        phase: grid,
        cycle_duration: trial.cycle_duration,
        body_mass: trial.body_mass,
    }
}

/// Second-order finite-difference derivative on a possibly non-uniform grid.
pub fn gradient(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    assert!(n >= 2 && y.len() == n);
    if n == 2 {
        let d = (y[1] - y[0]) / (x[1] - x[0]);
        return vec![d, d];
    }
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        out[i] = (h0 * h0 * y[i + 1] - h1 * h1 * y[i - 1] + (h1 * h1 - h0 * h0) * y[i]) / (h0 * h1 * (h0 + h1));
    }
    let one_sided = |i0: usize, i1: usize, i2: usize| {
        let h1 = x[i1] - x[i0];
        let h2 = x[i2] - x[i0];
        let a = -(h1 + h2) / (h1 * h2);
        let b = h2 / (h1 * (h2 - h1));
        let c = -h1 / (h2 * (h2 - h1));
        a * y[i0] + b * y[i1] + c * y[i2]
    };
    out[0] = one_sided(0, 1, 2);
    out[n - 1] = one_sided(n - 1, n - 2, n - 3);
    out
}

/// Joint rates `(φ̇, θ̇_l, θ̇_r)` in rad/s.
pub fn trial_rates(trial: &GaitTrial) -> Result<[Vec<f64>; 3], DataError> {
    let duration = trial
        .cycle_duration
        .ok_or_else(|| DataError::InvalidTrial(format!("{}: cycle duration missing", trial.label())))?;
    let scale = 100.0 / duration;
    let d = |y: &[f64]| gradient(&trial.phase, y).into_iter().map(|v| v * scale).collect::<Vec<_>>();
    Ok([d(&trial.phi), d(&trial.theta_l), d(&trial.theta_r)])
}

/// Stance-frame training states: `p_x = p_y = 0` coordinates, `p = M(q)q̇`.
pub fn states_from_trial(trial: &GaitTrial, biped: &Biped) -> Result<Vec<State>, DataError> {
    let [dphi, dl, dr] = trial_rates(trial)?;
    Ok((0..trial.len())
        .map(|i| {
            let q = GenCoord::new(0.0, 0.0, trial.phi[i], trial.theta_l[i], trial.theta_r[i]);
            biped.state_from_velocity(q, Vector5::new(0.0, 0.0, dphi[i], dl[i], dr[i]))
        })
        .collect())
}

pub const DEFAULT_STAIR_FACTOR: f64 = 1.5;

/// Multiplies positive (flexion) torque samples of a stair-ascent trial by `factor`.
pub fn scale_stair_flexion(trial: &GaitTrial, factor: f64) -> Result<GaitTrial, DataError> {
    if trial.task != TaskLabel::Sa {
        return Err(DataError::NotStairAscent(trial.task.to_string()));
    }
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(DataError::InvalidTrial(format!("stair scaling factor must be >= 1, got {factor}")));
    }
    let scale = |s: &[f64]| s.iter().map(|&x| if x > 0.0 { x * factor } else { x }).collect();
    Ok(GaitTrial { torque_l: scale(&trial.torque_l), torque_r: scale(&trial.torque_r), ..trial.clone() })
}

/// Applies [`scale_stair_flexion`] to every stair-ascent trial.
pub fn scale_stair_trials(dataset: &GaitDataset, factor: f64) -> Result<GaitDataset, DataError> {
    dataset.map_trials(|t| if t.task == TaskLabel::Sa { scale_stair_flexion(t, factor) } else { Ok(t.clone()) })
}

/// Settings for a synthetic planted-torque dataset.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub subjects: usize,
    pub strides_per_task: usize,
    pub points: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { subjects: 10, strides_per_task: 1, points: DEFAULT_CYCLE_POINTS, seed: 7 }
    }
}

fn task_kinematics(task: TaskLabel) -> (f64, f64, f64) {
    // (hip swing amplitude, thigh offset, trunk lean), rad.
    match task {
        TaskLabel::Lg1_0 => (0.40, 0.05, 0.05),
        TaskLabel::Lg1_45 => (0.50, 0.06, 0.08),
        TaskLabel::Ra5_2 => (0.45, 0.15, 0.10),
        TaskLabel::Ra11 => (0.50, 0.25, 0.15),
        TaskLabel::Rd5_2 => (0.38, -0.05, 0.03),
        TaskLabel::Rd11 => (0.35, -0.10, 0.02),
        TaskLabel::Sa => (0.60, 0.40, 0.20),
        TaskLabel::Sd => (0.30, 0.10, 0.05),
    }
}

/// Smooth gait-like kinematics with torques set exactly to `Φ(state)·α₀`.
pub fn synthetic_dataset(
    basis: &BasisSet,
    alpha0: &DVector<f64>,
    biped: &Biped,
    config: SyntheticConfig,
) -> Result<GaitDataset, DataError> {
    assert_eq!(alpha0.len(), basis.len(), "alpha0 length must match basis");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = uniform_phase(config.points);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut trials = Vec::new();
    for s in 0..config.subjects {
        let subject_id = format!("S{:02}", s + 1);
        let body_mass = rng.gen_range(55.0..95.0);
        let gain = rng.gen_range(0.85..1.15);
        let shift = rng.gen_range(-0.3..0.3);
        for task in TaskLabel::ALL {
            let (amp, offset, lean) = task_kinematics(task);
            for stride in 0..config.strides_per_task {
                let jitter = rng.gen_range(-0.02..0.02);
                let duration = rng.gen_range(0.95..1.3);
                let a = amp * gain;
                let c = shift + jitter;
                let right: Vec<f64> = grid.iter().map(|p| offset + a * (two_pi * p / 100.0 + c).cos()).collect();
                let left: Vec<f64> =
                    grid.iter().map(|p| offset + a * (two_pi * p / 100.0 + c + std::f64::consts::PI).cos()).collect();
                let trunk: Vec<f64> =
                    grid.iter().map(|p| lean + 0.03 * gain * (2.0 * two_pi * p / 100.0 + c).sin()).collect();
                // φ is the stance thigh; hips are thigh minus trunk.
                let phi = right.clone();
                let theta_r: Vec<f64> = right.iter().zip(&trunk).map(|(r, t)| r - t).collect();
                let theta_l: Vec<f64> = left.iter().zip(&trunk).map(|(l, t)| l - t).collect();
                let mut trial = GaitTrial {
                    subject_id: subject_id.clone(),
                    task,
                    stride,
                    phase: grid.clone(),
                    theta_l,
                    theta_r,
                    phi,
                    cycle_duration: Some(duration),
                    torque_l: vec![0.0; config.points],
                    torque_r: vec![0.0; config.points],
                    body_mass,
                };
                let states = states_from_trial(&trial, biped)?;
                for (i, st) in states.iter().enumerate() {
                    let u = basis.regressor(biped, st)? * alpha0;
                    trial.torque_l[i] = u[0];
                    trial.torque_r[i] = u[1];
                }
                trials.push(trial);
            }
        }
    }
    GaitDataset::new(trials)
}

impl From<crate::error::BasisError> for DataError {
    fn from(e: crate::error::BasisError) -> Self {
        match e {
            crate::error::BasisError::Model(m) => DataError::Model(m),
            other => DataError::InvalidTrial(other.to_string()),
        }
    }
}

// EMG processing.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Muscle {
    Rf,
    Bf,
    Gm,
}

impl fmt::Display for Muscle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Muscle::Rf => "RF",
            Muscle::Bf => "BF",
            Muscle::Gm => "GM",
        })
    }
}

impl FromStr for Muscle {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RF" => Ok(Muscle::Rf),
            "BF" => Ok(Muscle::Bf),
            "GM" => Ok(Muscle::Gm),
            _ => Err(DataError::Emg(format!("unknown muscle `{s}`"))),
        }
    }
}

/// Raw EMG channel with heel-strike sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgRecord {
    pub muscle: Muscle,
    pub fs: f64,
    pub samples: Vec<f64>,
    pub gait_events: Vec<usize>,
}

/// Sidecar for an EMG CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmgEvents {
    pub muscle: Muscle,
    /// Exoskeleton mode the record was captured under.
    #[serde(default)]
    pub mode: Option<String>,
    /// Heel-strike sample indices.
    pub events: Vec<usize>,
}

/// Reads `(t, value)` rows and an events sidecar; `fs` comes from the median time step.
pub fn load_emg(csv_path: &Path, events_path: &Path) -> Result<(EmgRecord, EmgEvents), DataError> {
    let events: EmgEvents = read_json(events_path)?;
    let mut reader =
        csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(csv_path).map_err(csv_err(csv_path))?;
    let mut t = Vec::new();
    let mut x = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err(csv_path))?;
        let line = row as u64 + 2;
        if rec.len() < 2 {
            return Err(DataError::MissingColumn { path: csv_path.display().to_string(), column: "value".into() });
        }
        t.push(parse_value(&rec[0], csv_path, line)?);
        x.push(parse_value(&rec[1], csv_path, line)?);
    }
    if t.len() < 2 {
        return Err(DataError::Emg(format!("{}: fewer than two samples", csv_path.display())));
    }
    let mut dts: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    dts.sort_by(f64::total_cmp);
    let dt = dts[dts.len() / 2];
    if !(dt > 0.0) {
        return Err(DataError::Emg(format!("{}: time column is not increasing", csv_path.display())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Emg(format!("{}: non-finite sample", csv_path.display())));
    }
    let record = EmgRecord { muscle: events.muscle, fs: 1.0 / dt, samples: x, gait_events: events.events.clone() };
    Ok((record, events))
}

/// Band-pass, RMS-envelope and cycle settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmgConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Butterworth prototype order.
    pub order: usize,
    pub rms_window_s: f64,
    /// Points used for ensemble averages.
    pub ensemble_points: usize,
}

impl Default for EmgConfig {
    fn default() -> Self {
        EmgConfig { low_hz: 20.0, high_hz: 200.0, order: 4, rms_window_s: 0.1, ensemble_points: 101 }
    }
}

/// Second-order section `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Sos = [f64; 6];

/// Digital Butterworth band-pass via bilinear transform with prewarping.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Vec<Sos> {
    assert!(order >= 1 && order % 2 == 0, "even prototype order required");
    assert!(0.0 < low_hz && low_hz < high_hz && high_hz < fs / 2.0, "band edges must lie in (0, fs/2)");
    let k = 2.0 * fs;
    let w1 = k * (std::f64::consts::PI * low_hz / fs).tan();
    let w2 = k * (std::f64::consts::PI * high_hz / fs).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;
    let mut sections = Vec::with_capacity(order);
    for i in 0..order / 2 {
        let theta = std::f64::consts::PI * (2 * i + 1 + order) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * bw / 2.0;
        let disc = (half * half - w0sq).sqrt();
        for s in [half + disc, half - disc] {
            let z = (k + s) / (k - s);
            sections.push([1.0, 0.0, -1.0, 1.0, -2.0 * z.re, z.norm_sqr()]);
        }
    }
    // Unit gain at the geometric centre frequency.
    let wc = 2.0 * ((w0sq.sqrt()) / k).atan();
    let g = sos_response(&sections, wc).norm();
    for b in &mut sections[0][..3] {
        *b /= g;
    }
    sections
}

/// Complex response at normalized angular frequency `w` (rad/sample).
pub fn sos_response(sos: &[Sos], w: f64) -> Complex64 {
    let z1 = Complex64::from_polar(1.0, -w);
    let z2 = z1 * z1;
    sos.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
        acc * (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2)
    })
}

fn sosfilt_with(sos: &[Sos], x: &[f64], zi: &[[f64; 2]]) -> Vec<f64> {
    let mut y = x.to_vec();
    for (s, z0) in sos.iter().zip(zi) {
        let [b0, b1, b2, _, a1, a2] = *s;
        let (mut z1, mut z2) = (z0[0], z0[1]);
        for v in y.iter_mut() {
            let xin = *v;
            let out = b0 * xin + z1;
            z1 = b1 * xin - a1 * out + z2;
            z2 = b2 * xin - a2 * out;
            *v = out;
        }
    }
    y
}

pub fn sosfilt(sos: &[Sos], x: &[f64]) -> Vec<f64> {
    sosfilt_with(sos, x, &vec![[0.0; 2]; sos.len()])
}

/// Steady-state section states for a unit step, scaled through the cascade.
fn sosfilt_zi(sos: &[Sos]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let [b0, b1, b2, _, a1, a2] = *s;
            let g = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let z2 = b2 - a2 * g;
            let z1 = b1 - a1 * g + z2;
            let zi = [scale * z1, scale * z2];
            scale *= g;
            zi
        })
        .collect()
}

/// Zero-phase forward-backward filtering with odd extension at both ends.
pub fn sosfiltfilt(sos: &[Sos], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let zi = sosfilt_zi(sos);
    let init = |x0: f64| zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect::<Vec<_>>();
    let mut y = sosfilt_with(sos, &ext, &init(ext[0]));
    y.reverse();
    let mut y = sosfilt_with(sos, &y, &init(y[0]));
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Centred moving-window RMS; the window shrinks at the record edges.
pub fn moving_rms(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i] * x[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(n);
            ((prefix[hi] - prefix[lo]).max(0.0) / (hi - lo) as f64).sqrt()
        })
        .collect()
}

impl EmgRecord {
    pub fn validate(&self, config: &EmgConfig) -> Result<(), DataError> {
        if !(self.fs > 2.0 * config.high_hz) {
            return Err(DataError::Emg(format!(
                "sampling rate {} Hz cannot support a {} Hz band edge",
                self.fs, config.high_hz
            )));
        }
        if self.gait_events.len() < 2 {
            return Err(DataError::Emg("at least two gait events are required".into()));
        }
        if self.gait_events.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DataError::Emg("gait events must be strictly increasing".into()));
        }
        if *self.gait_events.last().expect("events") >= self.samples.len() {
            return Err(DataError::Emg("gait event beyond the end of the record".into()));
        }
        Ok(())
    }

    /// Band-passed, rectified RMS envelope in signal units.
    pub fn envelope(&self, config: &EmgConfig) -> Result<Vec<f64>, DataError> {
        self.validate(config)?;
        let sos = butter_bandpass(config.order, config.low_hz, config.high_hz, self.fs);
        let filtered = sosfiltfilt(&sos, &self.samples);
        let window = ((config.rms_window_s * self.fs).round() as usize).max(1);
        Ok(moving_rms(&filtered, window))
    }
}

/// Mean envelope over cycles, each resampled to `points` phase samples.
pub fn ensemble_average(envelope: &[f64], events: &[usize], points: usize) -> Vec<f64> {
    let grid = uniform_phase(points);
    let mut acc = vec![0.0; points];
    let cycles = events.windows(2).count();
    for w in events.windows(2) {
        let (a, b) = (w[0], w[1]);
        let phase: Vec<f64> = (a..=b).map(|i| 100.0 * (i - a) as f64 / (b - a) as f64).collect();
        for (k, &p) in grid.iter().enumerate() {
            acc[k] += interp_linear(&phase, &envelope[a..=b], p);
        }
    }
    acc.iter().map(|v| v / cycles.max(1) as f64).collect()
}

/// Peak of a record's ensemble-average envelope.
pub fn ensemble_peak(record: &EmgRecord, config: &EmgConfig) -> Result<f64, DataError> {
    let env = record.envelope(config)?;
    Ok(ensemble_average(&env, &record.gait_events, config.ensemble_points).into_iter().fold(0.0, f64::max))
}

/// Per-cycle effort in %MVC·s, normalized by `reference_peak`.
///
/// A zero reference (silent signal in every mode) yields zero effort.
pub fn emg_effort(record: &EmgRecord, reference_peak: f64, config: &EmgConfig) -> Result<Vec<f64>, DataError> {
    let env = record.envelope(config)?;
    let dt = 1.0 / record.fs;
    Ok(record
        .gait_events
        .windows(2)
        .map(|w| {
            if reference_peak <= 0.0 {
                return 0.0;
            }
            let seg = &env[w[0]..=w[1]];
            let integral: f64 = seg.windows(2).map(|p| 0.5 * (p[0] + p[1]) * dt).sum();
            100.0 * integral / reference_peak
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffortRow {
    pub muscle: Muscle,
    pub mode: String,
    pub cycle: usize,
    pub effort: f64,
}

/// Efforts for several modes, normalized per muscle by the largest ensemble-average peak across modes.
pub fn emg_efforts_across_modes(records: &[(String, EmgRecord)], config: &EmgConfig) -> Result<Vec<EffortRow>, DataError> {
    let mut peaks: BTreeMap<Muscle, f64> = BTreeMap::new();
    for (_, r) in records {
        let p = ensemble_peak(r, config)?;
        let e = peaks.entry(r.muscle).or_insert(0.0);
        *e = e.max(p);
    }
    let mut rows = Vec::new();
    for (mode, r) in records {
        for (cycle, effort) in emg_effort(r, peaks[&r.muscle], config)?.into_iter().enumerate() {
            rows.push(EffortRow { muscle: r.muscle, mode: mode.clone(), cycle, effort });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{default_basis, Mode};
    use crate::model::ModelParams;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn trial(n: usize) -> GaitTrial {
        let phase = uniform_phase(n);
        GaitTrial {
            subject_id: "S01".into(),
            task: TaskLabel::Lg1_0,
            stride: 0,
            theta_l: phase.iter().map(|p| (p / 100.0 * 6.0).sin()).collect(),
            theta_r: phase.iter().map(|p| 0.3 * (p / 100.0 * 6.0).cos()).collect(),
            phi: vec![0.1; n],
            torque_l: phase.iter().map(|p| p / 100.0 - 0.5).collect(),
            torque_r: vec![0.2; n],
            cycle_duration: Some(1.0),
            body_mass: 70.0,
            phase,
        }
    }

    #[test]
    fn task_labels_roundtrip() {
        for t in TaskLabel::ALL {
            assert_eq!(t.as_str().parse::<TaskLabel>().unwrap(), t);
            assert_eq!(t.display_name().parse::<TaskLabel>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<TaskLabel>(&json).unwrap(), t);
        }
        assert_eq!("LG 1.4".parse::<TaskLabel>().unwrap(), TaskLabel::Lg1_45);
        assert!("XX".parse::<TaskLabel>().is_err());
    }

    #[test]
    fn trial_validation() {
        assert!(trial(10).validate().is_ok());
        let mut t = trial(10);
        t.phase[3] = t.phase[2];
        assert!(t.validate().is_err());
        let mut t = trial(10);
        t.body_mass = 0.0;
        assert!(t.validate().is_err());
        let mut t = trial(10);
        t.torque_l.pop();
        assert!(t.validate().is_err());
        assert!(GaitDataset::new(vec![]).is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let t = trial(150);
        assert_eq!(resample_cycle(&t, 150), t);
        let r = resample_cycle(&t, 37);
        assert!(r.phi.iter().all(|&v| v == 0.1));
        assert!(r.torque_r.iter().all(|&v| v == 0.2));
        assert_eq!(r.phase.len(), 37);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn resample_roundtrip_error_is_bounded() {
        let mut t = trial(150);
        t.theta_l = t.phase.iter().map(|p| (2.0 * std::f64::consts::PI * p / 100.0).sin()).collect();
        let r = resample_cycle(&resample_cycle(&t, 1000), 150);
        let err = r.theta_l.iter().zip(&t.theta_l).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn gradient_is_exact_for_quadratics() {
        let x = vec![0.0, 0.3, 1.0, 1.4, 2.5, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v * v - v + 1.0).collect();
        for (g, v) in gradient(&x, &y).iter().zip(&x) {
            assert!((g - (4.0 * v - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn states_constant_trial_has_zero_momentum() {
        let b = Biped::new(ModelParams::default()).unwrap();
        let mut t = trial(20);
        t.theta_l = vec![0.2; 20];
        t.theta_r = vec![-0.1; 20];
        for s in states_from_trial(&t, &b).unwrap() {
            assert!(s.p.amax() < 1e-12);
            assert_eq!(s.q.px(), 0.0);
        }
        t.cycle_duration = None;
        assert!(states_from_trial(&t, &b).is_err());
    }

    #[test]
    fn states_linear_ramp_has_constant_rate() {
        let b = Biped::new(ModelParams::default()).unwrap();
        let mut t = trial(50);
        t.theta_r = t.phase.iter().map(|p| 0.6 * p / 100.0).collect();
        t.cycle_duration = Some(1.0);
        let [_, _, dr] = trial_rates(&t).unwrap();
        assert!(dr.iter().all(|v| (v - 0.6).abs() < 1e-12));
        t.cycle_duration = Some(2.0);
        let [_, _, dr] = trial_rates(&t).unwrap();
        assert!(dr.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let s = states_from_trial(&t, &b).unwrap();
        let qdot = b.velocity(&s[10]).unwrap();
        assert!((qdot[crate::model::THETA_R] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn states_sinusoid_rate_matches_analytic() {
        let n = DEFAULT_CYCLE_POINTS;
        let mut t = trial(n);
        let w = 2.0 * std::f64::consts::PI;
        let duration = 1.2;
        t.cycle_duration = Some(duration);
        t.theta_l = t.phase.iter().map(|p| 0.5 * (w * p / 100.0).sin()).collect();
        let [_, dl, _] = trial_rates(&t).unwrap();
        let amp = 0.5 * w / duration;
        for (d, p) in dl.iter().zip(&t.phase) {
            let exact = amp * (w * p / 100.0).cos();
            assert!((d - exact).abs() < 0.02 * amp, "{d} vs {exact}");
        }
    }

    #[test]
    fn stair_scaling() {
        let mut t = trial(2);
        t.task = TaskLabel::Sa;
        t.torque_l = vec![-1.0, 2.0];
        assert_eq!(scale_stair_flexion(&t, 1.0).unwrap(), t);
        assert_eq!(scale_stair_flexion(&t, 1.5).unwrap().torque_l, vec![-1.0, 3.0]);
        assert!(matches!(scale_stair_flexion(&trial(2), 1.5), Err(DataError::NotStairAscent(_))));
        assert!(scale_stair_flexion(&t, 0.5).is_err());

        let t = GaitTrial { task: TaskLabel::Sa, ..trial(150) };
        let pos_mean = |s: &[f64]| s.iter().filter(|&&x| x > 0.0).sum::<f64>() / s.iter().filter(|&&x| x > 0.0).count() as f64;
        let scaled = scale_stair_flexion(&t, 1.7).unwrap();
        assert!((pos_mean(&scaled.torque_l) - 1.7 * pos_mean(&t.torque_l)).abs() < 1e-12);
    }

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    const HEADER: &str = "task,stride,phase,hip_angle_l,hip_angle_r,thigh_angle,hip_torque_l,hip_torque_r,body_mass,cycle_duration\n";

    #[test]
    fn load_single_stride_and_drop_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = HEADER.to_string();
        for p in [0.0, 50.0, 100.0] {
            text += &format!("LG_1_0,0,{p},10,-5,20,0.1,0.2,70,1.1\n");
        }
        write(&dir.path().join("AB01.csv"), &text);
        let ds = load_dataset(dir.path(), &SchemaConfig::default()).unwrap();
        assert_eq!(ds.len(), 1);
        let t = &ds.trials()[0];
        assert_eq!(t.len(), 3);
        assert_eq!(t.subject_id, "AB01");
        assert!((t.theta_l[0] - 10f64.to_radians()).abs() < 1e-15);
        assert_eq!(t.cycle_duration, Some(1.1));

        let mut text2 = text.clone();
        for p in [0.0, 50.0, 100.0] {
            let tq = if p == 50.0 { "NaN" } else { "0.1" };
            text2 += &format!("LG_1_0,1,{p},10,-5,20,{tq},0.2,70,1.1\n");
        }
        write(&dir.path().join("AB01.csv"), &text2);
        let ds = load_dataset(dir.path(), &SchemaConfig::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dropped_strides(), 1);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), &SchemaConfig::default()), Err(DataError::Empty)));
        write(&dir.path().join("a.csv"), "task,phase\nSA,0\n");
        assert!(matches!(
            load_dataset(dir.path(), &SchemaConfig::default()),
            Err(DataError::MissingColumn { .. })
        ));
        let bad_unit = SchemaConfig { angle_unit: "grad".into(), ..SchemaConfig::default() };
        assert!(matches!(load_dataset(dir.path(), &bad_unit), Err(DataError::UnitMismatch(_))));

        let mut text = HEADER.to_string();
        text += "SA,0,0,40,-5,20,0.1,0.2,70,1\nSA,0,100,40,-5,20,0.1,0.2,70,1\n";
        write(&dir.path().join("a.csv"), &text);
        let rad = SchemaConfig { angle_unit: "rad".into(), ..SchemaConfig::default() };
        assert!(matches!(load_dataset(dir.path(), &rad), Err(DataError::UnitMismatch(_))));
        let suffixed = SchemaConfig {
            angle_unit: "rad".into(),
            columns: ColumnMap { phi: "thigh_deg".into(), ..ColumnMap::default() },
        };
        assert!(matches!(load_dataset(dir.path(), &suffixed), Err(DataError::UnitMismatch(_))));
    }

    #[test]
    fn strides_split_on_phase_restart_without_stride_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = "task,phase,hip_angle_l,hip_angle_r,thigh_angle,hip_torque_l,hip_torque_r,body_mass\n".to_string();
        for _ in 0..3 {
            text += "RA_11,0,1,2,3,0,0,60\nRA_11,100,1,2,3,0,0,60\n";
        }
        write(&dir.path().join("S05.csv"), &text);
        let ds = load_dataset(dir.path(), &SchemaConfig::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.trials().iter().all(|t| t.cycle_duration.is_none()));
    }

    fn fixture() -> (Biped, BasisSet, DVector<f64>, GaitDataset) {
        let b = Biped::new(ModelParams::default()).unwrap();
        let basis = default_basis(Mode::Phi);
        let alpha0 = DVector::from_fn(basis.len(), |i, _| 0.1 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 });
        let ds = synthetic_dataset(&basis, &alpha0, &b, SyntheticConfig::default()).unwrap();
        (b, basis, alpha0, ds)
    }

    #[test]
    fn synthetic_fixture_groups_and_roundtrips() {
        let (b, basis, alpha0, ds) = fixture();
        assert_eq!(ds.groups().len(), 80);
        assert_eq!(ds.subjects().len(), 10);
        assert_eq!(ds.tasks(), TaskLabel::ALL.to_vec());
        let t = &ds.trials()[5];
        let s = states_from_trial(t, &b).unwrap();
        let u = basis.regressor(&b, &s[17]).unwrap() * &alpha0;
        assert!((u[0] - t.torque_l[17]).abs() < 1e-15);

        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(&ds, dir.path(), AngleUnit::Deg).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in back.trials().iter().zip(ds.trials()) {
            let err = a.theta_l.iter().zip(&b.theta_l).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);
            assert_eq!(a.torque_r, b.torque_r);
        }

        let cache = tempfile::tempdir().unwrap();
        let manifest = write_cache(&ds, cache.path()).unwrap();
        assert_eq!(manifest.trials, 80);
        let cached = read_cache(cache.path()).unwrap();
        assert_eq!(cached.trials(), ds.trials());
    }

    #[test]
    fn butterworth_magnitude_response() {
        let fs = 2000.0;
        let sos = butter_bandpass(4, 20.0, 200.0, fs);
        assert_eq!(sos.len(), 4);
        let mag = |f: f64| sos_response(&sos, 2.0 * std::f64::consts::PI * f / fs).norm();
        // Butterworth magnitude in prewarped frequency: 1/sqrt(1 + ((Ω² − Ω₀²)/(Ω·B))^(2N)).
        let k = 2.0 * fs;
        let pw = |f: f64| k * (std::f64::consts::PI * f / fs).tan();
        let (w1, w2) = (pw(20.0), pw(200.0));
        for f in [5.0, 10.0, 20.0, 35.0, 63.0, 100.0, 200.0, 300.0, 600.0] {
            let w = pw(f);
            let x = (w * w - w1 * w2) / (w * (w2 - w1));
            let exact = 1.0 / (1.0 + x.powi(8)).sqrt();
            assert!((mag(f) - exact).abs() < 1e-9, "{f} Hz: {} vs {exact}", mag(f));
        }
        assert!((mag(20.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    fn sine(f: f64, fs: f64, seconds: f64, amp: f64) -> Vec<f64> {
        let n = (fs * seconds) as usize;
        (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn band_pass_rms_of_sinusoids() {
        let fs = 2000.0;
        let config = EmgConfig::default();
        let rec = |x: Vec<f64>| EmgRecord { muscle: Muscle::Rf, fs, gait_events: vec![0, x.len() - 1], samples: x };
        let env50 = rec(sine(50.0, fs, 4.0, 1.0)).envelope(&config).unwrap();
        let env5 = rec(sine(5.0, fs, 4.0, 1.0)).envelope(&config).unwrap();
        let mid = env50.len() / 2;
        let interior = mid - 2000..mid + 2000;
        for i in interior.clone() {
            assert!((env50[i] - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.01 * std::f64::consts::FRAC_1_SQRT_2);
        }
        let mean = |e: &Vec<f64>| interior.clone().map(|i| e[i]).sum::<f64>() / interior.len() as f64;
        assert!(mean(&env50) >= 20.0 * mean(&env5), "{} vs {}", mean(&env50), mean(&env5));
    }

    #[test]
    fn filtfilt_is_zero_phase() {
        let fs = 2000.0;
        let sos = butter_bandpass(4, 20.0, 200.0, fs);
        let x = sine(63.0, fs, 2.0, 1.0);
        let y = sosfiltfilt(&sos, &x);
        let g = sos_response(&sos, 2.0 * std::f64::consts::PI * 63.0 / fs).norm_sqr();
        for i in 1000..3000 {
            assert!((y[i] - g * x[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn effort_zero_signal_and_gain_invariance() {
        let fs = 1000.0;
        let config = EmgConfig::default();
        let events = vec![0, 1000, 2000, 2999];
        let zero = EmgRecord { muscle: Muscle::Gm, fs, samples: vec![0.0; 3000], gait_events: events.clone() };
        let rows = emg_efforts_across_modes(&[("WOP".into(), zero)], &config).unwrap();
        assert!(rows.iter().all(|r| r.effort == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = |g: f64, rng: &mut ChaCha8Rng| (0..3000).map(|_| g * rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let a = noise(1.0, &mut rng);
        let b = noise(2.0, &mut rng);
        let mk = |x: &Vec<f64>, g: f64| EmgRecord {
            muscle: Muscle::Bf,
            fs,
            samples: x.iter().map(|v| v * g).collect(),
            gait_events: events.clone(),
        };
        let base = emg_efforts_across_modes(&[("PHI".into(), mk(&a, 1.0)), ("WOP".into(), mk(&b, 1.0))], &config).unwrap();
        let scaled = emg_efforts_across_modes(&[("PHI".into(), mk(&a, 3.0)), ("WOP".into(), mk(&b, 3.0))], &config).unwrap();
        for (x, y) in base.iter().zip(&scaled) {
            assert!((x.effort - y.effort).abs() < 1e-9 * x.effort.abs().max(1.0));
        }
    }

    #[test]
    fn burst_effort_matches_envelope_integral() {
        let fs = 2000.0;
        let config = EmgConfig::default();
        let (a, burst) = (0.8, 0.4);
        let mut x = vec![0.0; 6000];
        let start = 2000;
        for (i, v) in sine(50.0, fs, burst, a).into_iter().enumerate() {
            x[start + i] = v;
        }
        let record = EmgRecord { muscle: Muscle::Rf, fs, samples: x, gait_events: vec![0, 5999] };
        let peak = a * std::f64::consts::FRAC_1_SQRT_2;
        let effort = emg_effort(&record, peak, &config).unwrap()[0];
        let expected = 100.0 * (burst + config.rms_window_s / 3.0);
        assert!((effort - expected).abs() < 0.02 * expected, "{effort} vs {expected}");
    }

    #[test]
    fn emg_validation() {
        let config = EmgConfig::default();
        let low = EmgRecord { muscle: Muscle::Rf, fs: 300.0, samples: vec![0.0; 1000], gait_events: vec![0, 500] };
        assert!(low.envelope(&config).is_err());
        let no_events = EmgRecord { fs: 1000.0, gait_events: vec![], ..low.clone() };
        assert!(no_events.envelope(&config).is_err());
        let unordered = EmgRecord { fs: 1000.0, gait_events: vec![500, 100], ..low };
        assert!(unordered.envelope(&config).is_err());
    }

    proptest! {
        #[test]
        fn resample_preserves_bounds(vals in proptest::collection::vec(-5.0f64..5.0, 2..40), n in 2usize..200) {
            let m = vals.len();
            let mut t = trial(m);
            t.theta_l = vals.clone();
            let r = resample_cycle(&t, n);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.theta_l.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            prop_assert_eq!(r.theta_l[0], vals[0]);
            prop_assert!((r.theta_l[n - 1] - vals[m - 1]).abs() < 1e-12);
        }

        #[test]
        fn stair_scaling_never_touches_extension(vals in proptest::collection::vec(-3.0f64..3.0, 2..30), f in 1.0f64..3.0) {
            let mut t = trial(vals.len());
            t.task = TaskLabel::Sa;
            t.torque_r = vals.clone();
            let s = scale_stair_flexion(&t, f).unwrap();
            for (a, b) in s.torque_r.iter().zip(&vals) {
                if *b <= 0.0 { prop_assert_eq!(a, b); } else { prop_assert!((a - f * b).abs() < 1e-12); }
            }
        }
    }
}

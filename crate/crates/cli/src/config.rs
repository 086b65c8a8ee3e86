use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hamshape::basis::Mode;
use hamshape::dataio::EmgConfig;
use hamshape::optim::{FitConfig, DEFAULT_SATURATION};
use serde::{Deserialize, Serialize};

/// Scripted human hip torque for closed-loop simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HumanInput {
    Zero,
    /// Cancels gravity and the shaping torque on the actuated joints.
    GravityCompensating,
    /// `v_i = amplitude_i · sin(2π·frequency_hz·t + phase_i)`.
    Sinusoidal { amplitude: [f64; 2], frequency_hz: f64, #[serde(default)] phase: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub duration: f64,
    pub dt: f64,
    pub log_every: usize,
    /// `[px, py, φ, θ_l, θ_r]`.
    pub initial_q: [f64; 5],
    pub initial_qdot: [f64; 5],
    pub human: HumanInput,
    /// Shaping spec or fit result JSON; coefficients default to zero.
    pub spec: Option<PathBuf>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            duration: 5.0,
            dt: 1e-4,
            log_every: 100,
            initial_q: [0.0; 5],
            initial_qdot: [0.0; 5],
            human: HumanInput::Zero,
            spec: None,
        }
    }
}

/// Conversion of normalized torque to commanded torque.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssistConfig {
    /// Level of assistance in `[0, 1]`.
    pub loa: f64,
    /// Body mass in kg; the dataset mean when absent.
    pub body_mass: Option<f64>,
    /// Actuator limit in Nm.
    pub saturation: f64,
}

impl Default for AssistConfig {
    fn default() -> Self {
        AssistConfig { loa: 1.0, body_mass: None, saturation: DEFAULT_SATURATION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmgInput {
    pub csv: PathBuf,
    pub events: PathBuf,
    /// Overrides the mode named in the events sidecar.
    #[serde(default)]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmgSection {
    pub records: Vec<EmgInput>,
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    pub rms_window_s: f64,
    pub ensemble_points: usize,
}

impl Default for EmgSection {
    fn default() -> Self {
        let d = EmgConfig::default();
        EmgSection {
            records: Vec::new(),
            low_hz: d.low_hz,
            high_hz: d.high_hz,
            order: d.order,
            rms_window_s: d.rms_window_s,
            ensemble_points: d.ensemble_points,
        }
    }
}

impl EmgSection {
    pub fn filter_config(&self) -> EmgConfig {
        EmgConfig {
            low_hz: self.low_hz,
            high_hz: self.high_hz,
            order: self.order,
            rms_window_s: self.rms_window_s,
            ensemble_points: self.ensemble_points,
        }
    }
}

/// Planted-torque dataset generated in place of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub subjects: usize,
    pub strides_per_task: usize,
    pub points: usize,
    /// Basis of the planted torques.
    pub planted_mode: Mode,
    /// Planted coefficients; a fixed deterministic pattern when absent.
    pub alpha: Option<Vec<f64>>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource { subjects: 10, strides_per_task: 1, points: 150, planted_mode: Mode::Phi, alpha: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisFiles {
    pub phi: Option<PathBuf>,
    pub wop: Option<PathBuf>,
}

impl BasisFiles {
    pub fn get(&self, mode: Mode) -> Option<&PathBuf> {
        match mode {
            Mode::Phi => self.phi.as_ref(),
            Mode::Wop => self.wop.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// CV table to compare; `<out>/cv_table.csv` when absent.
    pub table: Option<PathBuf>,
}

/// Everything a command needs; relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model parameter JSON; default anthropometrics when absent.
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
    pub mode: Mode,
    pub basis: BasisFiles,
    pub fit: FitConfig,
    pub simulation: SimulationConfig,
    pub assist: AssistConfig,
    pub emg: EmgSection,
    pub report: ReportConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            dataset: None,
            synthetic: None,
            mode: Mode::Phi,
            basis: BasisFiles::default(),
            fit: FitConfig::default(),
            simulation: SimulationConfig::default(),
            assist: AssistConfig::default(),
            emg: EmgSection::default(),
            report: ReportConfig::default(),
            out: PathBuf::from("out"),
            seed: 7,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

fn require_exists(what: &str, p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("{what} `{}` does not exist", p.display());
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve_opt(base, &mut cfg.model);
        resolve_opt(base, &mut cfg.dataset);
        resolve_opt(base, &mut cfg.basis.phi);
        resolve_opt(base, &mut cfg.basis.wop);
        resolve_opt(base, &mut cfg.simulation.spec);
        resolve_opt(base, &mut cfg.report.table);
        resolve(base, &mut cfg.out);
        for r in &mut cfg.emg.records {
            resolve(base, &mut r.csv);
            resolve(base, &mut r.events);
        }
        Ok(cfg)
    }

    /// Range and existence checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        for (what, p) in [
            ("model file", &self.model),
            ("dataset", &self.dataset),
            ("PHI basis file", &self.basis.phi),
            ("WOP basis file", &self.basis.wop),
            ("shaping spec", &self.simulation.spec),
        ] {
            if let Some(p) = p {
                require_exists(what, p)?;
            }
        }
        if self.dataset.is_some() && self.synthetic.is_some() {
            bail!("`dataset` and `synthetic` are mutually exclusive");
        }
        if let Some(s) = &self.synthetic {
            if s.subjects == 0 || s.strides_per_task == 0 || s.points < 3 {
                bail!("synthetic source needs subjects ≥ 1, strides_per_task ≥ 1 and points ≥ 3");
            }
        }
        let sim = &self.simulation;
        if !(sim.dt > 0.0 && sim.dt.is_finite()) {
            bail!("simulation dt must be positive, got {}", sim.dt);
        }
        if !(sim.duration > 0.0 && sim.duration.is_finite()) {
            bail!("simulation duration must be positive, got {}", sim.duration);
        }
        if sim.log_every == 0 {
            bail!("simulation log_every must be at least 1");
        }
        if sim.initial_q.iter().chain(&sim.initial_qdot).any(|x| !x.is_finite()) {
            bail!("initial state must be finite");
        }
        if let HumanInput::Sinusoidal { amplitude, frequency_hz, phase } = &sim.human {
            if amplitude.iter().chain(phase).any(|x| !x.is_finite()) || !(*frequency_hz >= 0.0 && frequency_hz.is_finite()) {
                bail!("sinusoidal input needs finite amplitude/phase and a non-negative frequency");
            }
        }
        let a = &self.assist;
        if !(0.0..=1.0).contains(&a.loa) {
            bail!("assist loa must lie in [0, 1], got {}", a.loa);
        }
        if !(a.saturation > 0.0) {
            bail!("assist saturation must be positive, got {}", a.saturation);
        }
        if let Some(m) = a.body_mass {
            if !(m > 0.0 && m.is_finite()) {
                bail!("assist body_mass must be positive, got {m}");
            }
        }
        let e = &self.emg;
        if !(e.low_hz > 0.0 && e.low_hz < e.high_hz) {
            bail!("EMG band must satisfy 0 < low_hz < high_hz, got {}..{}", e.low_hz, e.high_hz);
        }
        if e.order == 0 || !(e.rms_window_s > 0.0) || e.ensemble_points < 2 {
            bail!("EMG order, rms_window_s and ensemble_points must be positive (ensemble_points ≥ 2)");
        }
        for r in &e.records {
            require_exists("EMG csv", &r.csv)?;
            require_exists("EMG events", &r.events)?;
        }
        Ok(())
    }

    pub fn seconds_to_steps(&self) -> usize {
        (self.simulation.duration / self.simulation.dt).round() as usize
    }
}

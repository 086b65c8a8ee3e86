use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use hamshape::basis::{default_basis, BasisSet, BasisSetFile, Mode};
use hamshape::dataio::{load_dataset_dir, load_emg, synthetic_dataset, uniform_phase, GaitDataset, SyntheticConfig, TaskLabel};
use hamshape::model::{actuated_rows, Biped, GenCoord, ModelParams, PHI};
use hamshape::optim::{
    command_torque, fit, loso_cv_blocks, prepare_dataset, regressor_blocks, write_cv_table, CvReport, TrialBlock,
    REFERENCE_TABLE,
};
use hamshape::shaping::{control_law, matching_residual, passivity_audit, ClosedLoop, ShapingSpec, ShapingSpecFile};
use hamshape::{FitError, ModelError, ShapingError};
use nalgebra::{DVector, Vector2, Vector5};
use serde::Serialize;

use crate::config::{HumanInput, RunConfig};

/// Failure category; each maps to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Output,
    Config,
    Ingestion,
    Solver,
    Integration,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Output => 1,
            Kind::Config => 2,
            Kind::Ingestion => 3,
            Kind::Solver => 4,
            Kind::Integration => 5,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            Kind::Output => "output error",
            Kind::Config => "configuration error",
            Kind::Ingestion => "ingestion error",
            Kind::Solver => "solver error",
            Kind::Integration => "integration error",
        };
        write!(f, "{label}: {:#}", self.error)
    }
}

pub type CmdResult<T> = Result<T, Failure>;

pub trait Tag<T> {
    fn tag(self, kind: Kind) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn tag(self, kind: Kind) -> CmdResult<T> {
        self.map_err(|e| Failure { kind, error: e.into() })
    }
}

fn fit_failure(e: FitError) -> Failure {
    let kind = match &e {
        FitError::Config(_) | FitError::Basis(_) => Kind::Config,
        FitError::Data(_) | FitError::Empty | FitError::TooFewSubjects(_) | FitError::TaskAbsent(_) => Kind::Ingestion,
        FitError::Model(ModelError::IntegrationBlowUp { .. }) => Kind::Integration,
        _ => Kind::Solver,
    };
    Failure { kind, error: e.into() }
}

fn shaping_failure(e: ShapingError) -> Failure {
    let kind = match &e {
        ShapingError::Basis(_) => Kind::Config,
        _ => Kind::Integration,
    };
    Failure { kind, error: e.into() }
}

/// Writes through a temporary file in the target directory, then renames it into place.
pub fn write_atomic<F>(path: &Path, write: F) -> CmdResult<()>
where
    F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).tag(Kind::Output)?;
    let run = || -> anyhow::Result<()> {
        let tmp = tempfile::NamedTempFile::new_in(dir)?;
        let mut w = BufWriter::new(tmp);
        write(&mut w)?;
        let tmp = w.into_inner().map_err(|e| e.into_error())?;
        tmp.persist(path)?;
        Ok(())
    };
    run().with_context(|| format!("writing {}", path.display())).tag(Kind::Output)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

pub fn load_biped(cfg: &RunConfig) -> CmdResult<Biped> {
    let params = match &cfg.model {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).tag(Kind::Config)?;
            serde_json::from_str::<ModelParams>(&text)
                .with_context(|| format!("parsing model parameters {}", path.display()))
                .tag(Kind::Config)?
        }
        None => ModelParams::default(),
    };
    Biped::new(params).tag(Kind::Config)
}

pub fn load_basis(cfg: &RunConfig, mode: Mode) -> CmdResult<BasisSet> {
    let Some(path) = cfg.basis.get(mode) else {
        return Ok(default_basis(mode));
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).tag(Kind::Config)?;
    let file: BasisSetFile =
        serde_json::from_str(&text).with_context(|| format!("parsing basis file {}", path.display())).tag(Kind::Config)?;
    if file.mode != mode {
        return Err(anyhow!("basis file {} is for {}, expected {mode}", path.display(), file.mode)).tag(Kind::Config);
    }
    BasisSet::from_file(file).with_context(|| format!("basis file {}", path.display())).tag(Kind::Config)
}

/// Deterministic planted coefficients used when a synthetic source gives none.
pub fn planted_pattern(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| 0.15 * ((i as f64) * 1.3 + 0.4).sin())
}

pub fn load_data(cfg: &RunConfig, biped: &Biped) -> CmdResult<GaitDataset> {
    if let Some(dir) = &cfg.dataset {
        let ds = load_dataset_dir(dir).with_context(|| format!("loading dataset {}", dir.display())).tag(Kind::Ingestion)?;
        if ds.dropped_strides() > 0 {
            log::warn!("dropped {} strides containing missing values", ds.dropped_strides());
        }
        return Ok(ds);
    }
    let Some(src) = &cfg.synthetic else {
        return Err(anyhow!("a `dataset` directory or a `synthetic` source is required")).tag(Kind::Config);
    };
    let basis = default_basis(src.planted_mode);
    let alpha = match &src.alpha {
        Some(a) if a.len() != basis.len() => {
            return Err(anyhow!("planted alpha has {} entries, {} basis has {}", a.len(), src.planted_mode, basis.len()))
                .tag(Kind::Config)
        }
        Some(a) => DVector::from_vec(a.clone()),
        None => planted_pattern(basis.len()),
    };
    let synth = SyntheticConfig {
        subjects: src.subjects,
        strides_per_task: src.strides_per_task,
        points: src.points,
        seed: cfg.seed,
    };
    synthetic_dataset(&basis, &alpha, biped, synth).tag(Kind::Ingestion)
}

fn mean_body_mass(ds: &GaitDataset) -> f64 {
    let trials = ds.trials();
    trials.iter().map(|t| t.body_mass).sum::<f64>() / trials.len() as f64
}

/// Across-subject mean of per-subject stride averages, per task and phase sample.
pub struct TaskProfile {
    pub task: TaskLabel,
    pub phase: Vec<f64>,
    /// Predicted left, normative left, predicted right, normative right.
    pub series: [Vec<f64>; 4],
}

pub fn task_profiles(blocks: &[TrialBlock], alpha: &DVector<f64>) -> Vec<TaskProfile> {
    let mut per_subject: BTreeMap<(TaskLabel, &str), (usize, [Vec<f64>; 4])> = BTreeMap::new();
    for b in blocks {
        let (pl, pr) = b.predict(alpha);
        let (yl, yr) = b.targets();
        let n = b.samples();
        let e = per_subject.entry((b.task, b.subject.as_str())).or_insert_with(|| (0, std::array::from_fn(|_| vec![0.0; n])));
        e.0 += 1;
        for (acc, s) in e.1.iter_mut().zip([pl, yl, pr, yr]) {
            for (a, x) in acc.iter_mut().zip(s) {
                *a += x;
            }
        }
    }
    let mut per_task: BTreeMap<TaskLabel, (usize, [Vec<f64>; 4])> = BTreeMap::new();
    for ((task, _), (count, sums)) in per_subject {
        let n = sums[0].len();
        let e = per_task.entry(task).or_insert_with(|| (0, std::array::from_fn(|_| vec![0.0; n])));
        e.0 += 1;
        for (acc, s) in e.1.iter_mut().zip(sums) {
            for (a, x) in acc.iter_mut().zip(s) {
                *a += x / count as f64;
            }
        }
    }
    per_task
        .into_iter()
        .map(|(task, (subjects, mut series))| {
            for s in &mut series {
                s.iter_mut().for_each(|x| *x /= subjects as f64);
            }
            TaskProfile { task, phase: uniform_phase(series[0].len()), series }
        })
        .collect()
}

pub fn cmd_fit(cfg: &RunConfig) -> CmdResult<()> {
    let biped = load_biped(cfg)?;
    let basis = load_basis(cfg, cfg.mode)?;
    let ds = load_data(cfg, &biped)?;
    let (result, blocks) = fit(&ds, &basis, &biped, &cfg.fit).map_err(fit_failure)?;
    let tag = cfg.mode.to_string().to_lowercase();
    let json_path = cfg.out.join(format!("fit_{tag}.json"));
    write_json(&json_path, &result)?;

    let mass = cfg.assist.body_mass.unwrap_or_else(|| mean_body_mass(&ds));
    let profiles = task_profiles(&blocks, &result.alpha_vector());
    let csv_path = cfg.out.join(format!("fit_{tag}_torque.csv"));
    write_atomic(&csv_path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "task", "phase", "predicted_l", "normative_l", "predicted_r", "normative_r", "command_l_nm", "command_r_nm",
        ])?;
        for p in &profiles {
            for (i, phase) in p.phase.iter().enumerate() {
                let u = Vector2::new(p.series[0][i], p.series[2][i]);
                let cmd = command_torque(&u, mass, cfg.assist.loa, cfg.assist.saturation)?;
                out.write_record([
                    p.task.display_name().to_string(),
                    fmt_num(*phase),
                    fmt_num(p.series[0][i]),
                    fmt_num(p.series[1][i]),
                    fmt_num(p.series[2][i]),
                    fmt_num(p.series[3][i]),
                    fmt_num(cmd[0]),
                    fmt_num(cmd[1]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    })?;

    println!(
        "fit {}: {} coefficients, objective {:.6e}, optimality residual {:.2e}, {} iterations",
        result.mode,
        result.alpha.len(),
        result.objective,
        result.optimality_residual,
        result.iterations
    );
    for m in &result.per_task_metrics {
        println!("  {:<8} SIM {:6.2}  VAF {:6.2}", m.task.display_name(), m.sim_mean, m.vaf_mean);
    }
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    mode: Mode,
    mean_sim: f64,
    mean_vaf: f64,
}

fn overall(report: &CvReport) -> (f64, f64) {
    let n = report.per_task.len() as f64;
    (
        report.per_task.iter().map(|m| m.sim_mean).sum::<f64>() / n,
        report.per_task.iter().map(|m| m.vaf_mean).sum::<f64>() / n,
    )
}

fn print_cv_table(phi: &CvReport, wop: &CvReport) {
    println!("{:<8} {:>16} {:>16} {:>16} {:>16}", "task", "SIM PHI", "SIM WOP", "VAF PHI", "VAF WOP");
    for task in TaskLabel::ALL {
        let (Some(p), Some(w)) = (phi.task(task), wop.task(task)) else { continue };
        println!(
            "{:<8} {:>7.1} ({:>5.1}) {:>7.1} ({:>5.1}) {:>7.1} ({:>5.1}) {:>7.1} ({:>5.1})",
            task.display_name(),
            p.sim_mean,
            p.sim_sd,
            w.sim_mean,
            w.sim_sd,
            p.vaf_mean,
            p.vaf_sd,
            w.vaf_mean,
            w.vaf_sd
        );
    }
}

pub fn cmd_cv(cfg: &RunConfig, sweep: &[f64]) -> CmdResult<()> {
    if let Some(l) = sweep.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(anyhow!("lambda sweep values must be non-negative, got {l}")).tag(Kind::Config);
    }
    let biped = load_biped(cfg)?;
    let ds = load_data(cfg, &biped)?;
    let prepared = prepare_dataset(&ds, &cfg.fit).map_err(fit_failure)?;
    let mut blocks = Vec::new();
    for mode in [Mode::Phi, Mode::Wop] {
        let basis = load_basis(cfg, mode)?;
        let b = regressor_blocks(&prepared, &basis, &biped).map_err(fit_failure)?;
        blocks.push((mode, basis, b));
    }
    let lambdas: Vec<Option<f64>> = if sweep.is_empty() { vec![None] } else { sweep.iter().copied().map(Some).collect() };
    let mut rows = Vec::new();
    for lambda in &lambdas {
        let mut fit_cfg = cfg.fit.clone();
        if let Some(l) = lambda {
            fit_cfg.weights.lambda = *l;
        }
        let mut reports = BTreeMap::new();
        for (mode, basis, b) in &blocks {
            let report = loso_cv_blocks(b, basis, &fit_cfg).map_err(fit_failure)?;
            let (mean_sim, mean_vaf) = overall(&report);
            rows.push(SweepRow { lambda: fit_cfg.weights.lambda, mode: *mode, mean_sim, mean_vaf });
            reports.insert(*mode, report);
        }
        let suffix = lambda.map(|l| format!("_lambda_{l}")).unwrap_or_default();
        let (phi, wop) = (&reports[&Mode::Phi], &reports[&Mode::Wop]);
        write_json(&cfg.out.join(format!("cv_phi{suffix}.json")), phi)?;
        write_json(&cfg.out.join(format!("cv_wop{suffix}.json")), wop)?;
        let table = cfg.out.join(format!("cv_table{suffix}.csv"));
        write_atomic(&table, |w| Ok(write_cv_table(phi, wop, w)?))?;
        if let Some(l) = lambda {
            println!("lambda = {l}");
        }
        print_cv_table(phi, wop);
        println!("wrote {}", table.display());
    }
    if !sweep.is_empty() {
        let path = cfg.out.join("lambda_sweep.csv");
        write_atomic(&path, |w| {
            let mut out = csv::Writer::from_writer(w);
            for r in &rows {
                out.serialize(r)?;
            }
            out.flush()?;
            Ok(())
        })?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn load_spec(path: &Path) -> CmdResult<ShapingSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).tag(Kind::Config)?;
    let file: ShapingSpecFile =
        serde_json::from_str(&text).with_context(|| format!("parsing shaping spec {}", path.display())).tag(Kind::Config)?;
    ShapingSpec::from_file(file).with_context(|| format!("shaping spec {}", path.display())).tag(Kind::Config)
}

#[derive(Serialize)]
struct SimulationSummary {
    mode: Mode,
    steps: usize,
    dt: f64,
    final_t: f64,
    samples: usize,
    max_rel_h_drift: f64,
    max_abs_displacement: f64,
    integrated_energy_residual: f64,
    mean_abs_h_tilde: f64,
    max_matching_residual: f64,
}

pub fn cmd_simulate(cfg: &RunConfig, spec_override: Option<&PathBuf>) -> CmdResult<()> {
    let biped = load_biped(cfg)?;
    let spec = match spec_override.or(cfg.simulation.spec.as_ref()) {
        Some(p) => load_spec(p)?,
        None => ShapingSpec::zero(load_basis(cfg, cfg.mode)?),
    };
    let sim = &cfg.simulation;
    let q0 = GenCoord(Vector5::from(sim.initial_q));
    let initial = biped.state_from_velocity(q0, Vector5::from(sim.initial_qdot));
    if sim.human == HumanInput::GravityCompensating && biped.grad_potential(&q0)[PHI].abs() > 1e-9 {
        log::warn!("initial pose is not balanced about the stance point; gravity compensation cannot hold it");
    }
    let human = |t: f64, s: &hamshape::model::State| -> Vector2<f64> {
        match &sim.human {
            HumanInput::Zero => Vector2::zeros(),
            HumanInput::GravityCompensating => {
                let u = control_law(&spec, &biped, s).unwrap_or_else(|_| Vector2::repeat(f64::NAN));
                actuated_rows(&biped.grad_potential(&s.q)) - u
            }
            HumanInput::Sinusoidal { amplitude, frequency_hz, phase } => {
                let w = 2.0 * std::f64::consts::PI * frequency_hz;
                Vector2::new(amplitude[0] * (w * t + phase[0]).sin(), amplitude[1] * (w * t + phase[1]).sin())
            }
        }
    };
    let policy = ClosedLoop { biped: &biped, spec: &spec, human };
    let steps = cfg.seconds_to_steps();
    let traj = biped.simulate(&initial, sim.dt, steps, sim.log_every, &policy).tag(Kind::Integration)?;

    let v: Vec<Vector2<f64>> = traj.samples.iter().map(|s| s.v).collect();
    let audit = passivity_audit(&biped, &traj, &spec, &v).map_err(shaping_failure)?;
    let mut residuals = Vec::with_capacity(traj.samples.len());
    for s in &traj.samples {
        residuals.push((s.t, matching_residual(&biped, &s.state, &spec).map_err(shaping_failure)?));
    }

    write_atomic(&cfg.out.join("trajectory.csv"), |w| Ok(traj.write_csv(w)?))?;
    write_atomic(&cfg.out.join("audit.csv"), |w| Ok(audit.write_csv(w)?))?;
    write_atomic(&cfg.out.join("matching_residual.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "r_phi", "r_px", "r_py", "max_abs"])?;
        for (t, r) in &residuals {
            out.write_record([*t, r[0], r[1], r[2], r.amax()].iter().map(|x| format!("{x:.12e}")))?;
        }
        out.flush()?;
        Ok(())
    })?;

    let h0 = traj.samples[0].h;
    let summary = SimulationSummary {
        mode: spec.mode(),
        steps,
        dt: sim.dt,
        final_t: traj.samples.last().map_or(0.0, |s| s.t),
        samples: traj.samples.len(),
        max_rel_h_drift: traj.samples.iter().map(|s| (s.h - h0).abs()).fold(0.0, f64::max) / h0.abs().max(f64::MIN_POSITIVE),
        max_abs_displacement: traj.samples.iter().map(|s| (s.state.q.0 - q0.0).amax()).fold(0.0, f64::max),
        integrated_energy_residual: audit.integrated_residual,
        mean_abs_h_tilde: audit.mean_abs_h_tilde,
        max_matching_residual: residuals.iter().map(|(_, r)| r.amax()).fold(0.0, f64::max),
    };
    write_json(&cfg.out.join("simulation.json"), &summary)?;
    println!(
        "simulated {:.3} s ({} steps): max relative H drift {:.3e}, energy residual {:.3e}, max matching residual {:.3e}",
        summary.final_t, steps, summary.max_rel_h_drift, summary.integrated_energy_residual, summary.max_matching_residual
    );
    println!("wrote trajectory.csv, audit.csv, matching_residual.csv and simulation.json to {}", cfg.out.display());
    Ok(())
}

pub fn cmd_emg(cfg: &RunConfig) -> CmdResult<()> {
    if cfg.emg.records.is_empty() {
        return Err(anyhow!("no EMG records configured")).tag(Kind::Config);
    }
    let filter = cfg.emg.filter_config();
    let mut records = Vec::new();
    for input in &cfg.emg.records {
        let (record, events) = load_emg(&input.csv, &input.events).tag(Kind::Ingestion)?;
        let mode = input
            .mode
            .clone()
            .or(events.mode)
            .or_else(|| input.csv.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_default();
        records.push((mode, record));
    }
    let rows = hamshape::dataio::emg_efforts_across_modes(&records, &filter).tag(Kind::Ingestion)?;
    let path = cfg.out.join("emg_effort.csv");
    write_atomic(&path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["muscle", "mode", "cycle", "effort_mvc_s"])?;
        for r in &rows {
            out.write_record([r.muscle.to_string(), r.mode.clone(), r.cycle.to_string(), format!("{:.6}", r.effort)])?;
        }
        out.flush()?;
        Ok(())
    })?;
    println!("{} effort rows from {} records; wrote {}", rows.len(), records.len(), path.display());
    Ok(())
}

const METRICS: [&str; 4] = ["sim_phi", "sim_wop", "vaf_phi", "vaf_wop"];

#[derive(Serialize)]
struct ReportSummary {
    tasks: usize,
    phi_leads_sim: usize,
    within_10_sim: usize,
}

pub fn cmd_report(cfg: &RunConfig) -> CmdResult<()> {
    let table = cfg.report.table.clone().unwrap_or_else(|| cfg.out.join("cv_table.csv"));
    let mut reader = csv::Reader::from_path(&table)
        .with_context(|| format!("opening CV table {} (run `cv` first)", table.display()))
        .tag(Kind::Ingestion)?;
    let headers = reader.headers().tag(Kind::Ingestion)?.clone();
    let col = |name: &str| -> CmdResult<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| anyhow!("{}: missing column `{name}`", table.display())).tag(Kind::Ingestion)
    };
    let task_col = col("task")?;
    let cols: Vec<usize> = METRICS.iter().map(|m| col(&format!("{m}_mean"))).collect::<CmdResult<_>>()?;

    let mut out_rows = Vec::new();
    let (mut leads, mut within) = (0, 0);
    for rec in reader.records() {
        let rec = rec.tag(Kind::Ingestion)?;
        let task: TaskLabel = rec[task_col].parse().tag(Kind::Ingestion)?;
        let reference = REFERENCE_TABLE.iter().find(|(t, _)| *t == task).map(|(_, r)| *r).expect("reference row per task");
        // Reference order: SIM PHI, SIM WOP, VAF PHI, VAF WOP.
        let measured: Vec<f64> = cols.iter().map(|c| rec[*c].parse::<f64>().unwrap_or(f64::NAN)).collect();
        if measured[0] >= measured[1] {
            leads += 1;
        }
        if (measured[0] - reference[0].0).abs() <= 10.0 && (measured[1] - reference[1].0).abs() <= 10.0 {
            within += 1;
        }
        let mut row = vec![task.display_name().to_string()];
        for (m, r) in measured.iter().zip(reference) {
            row.extend([fmt_num(*m), fmt_num(r.0), fmt_num(m - r.0)]);
        }
        row.push((measured[0] >= measured[1]).to_string());
        out_rows.push(row);
    }
    let path = cfg.out.join("report.csv");
    write_atomic(&path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["task".to_string()];
        for m in METRICS {
            header.extend([m.to_string(), format!("{m}_ref"), format!("{m}_delta")]);
        }
        header.push("phi_leads_sim".into());
        out.write_record(&header)?;
        for r in &out_rows {
            out.write_record(r)?;
        }
        out.flush()?;
        Ok(())
    })?;
    let summary = ReportSummary { tasks: out_rows.len(), phi_leads_sim: leads, within_10_sim: within };
    write_json(&cfg.out.join("report.json"), &summary)?;
    println!(
        "PHI ≥ WOP in mean SIM on {leads}/{n} tasks; SIM within ±10 of the reference on {within}/{n} tasks",
        n = summary.tasks
    );
    println!("wrote {}", path.display());
    Ok(())
}

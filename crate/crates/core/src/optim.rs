//! L1-regularized weighted least-squares fitting of shaping coefficients,
//! SIM/VAF metrics and leave-one-subject-out cross-validation.

use std::collections::BTreeMap;

use log::{debug, info};
use nalgebra::{DMatrix, DVector, Vector2, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, Mode};
use crate::dataio::{
    resample_cycle, scale_stair_trials, states_from_trial, GaitDataset, TaskLabel, DEFAULT_CYCLE_POINTS,
    DEFAULT_STAIR_FACTOR,
};
use crate::error::FitError;
use crate::model::{Biped, GenCoord};

/// Weights and regularization of the fitting objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightsConfig {
    /// Zero-pose weight `W₀ = w₀·I`.
    pub w0: f64,
    /// L1 coefficient, applied to standardized coefficients when `standardize` is set.
    pub lambda: f64,
    /// Per-task sample weights `W_jk = w·I`; missing tasks weigh 1.
    pub task_weights: BTreeMap<TaskLabel, f64>,
    pub standardize: bool,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig { w0: 10.0, lambda: 0.05, task_weights: BTreeMap::new(), standardize: true }
    }
}

impl WeightsConfig {
    pub fn task_weight(&self, task: TaskLabel) -> f64 {
        self.task_weights.get(&task).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.w0 >= 0.0 && self.w0.is_finite()) {
            return Err(FitError::Config(format!("w0 must be non-negative, got {}", self.w0)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FitError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if let Some((t, w)) = self.task_weights.iter().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
            return Err(FitError::Config(format!("weight for {t} must be positive, got {w}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Optimality-residual tolerance, relative to `max(1, ‖∇f(0)‖∞)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Record the objective of every accepted iterate.
    pub record_history: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-8, max_iter: 50_000, record_history: false }
    }
}

/// Full fitting pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub weights: WeightsConfig,
    pub solver: SolverConfig,
    /// Flexion scaling for stair-ascent targets.
    pub stair_factor: f64,
    /// Phase samples per stride after resampling.
    pub points: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            weights: WeightsConfig::default(),
            solver: SolverConfig::default(),
            stair_factor: DEFAULT_STAIR_FACTOR,
            points: DEFAULT_CYCLE_POINTS,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        self.weights.validate()?;
        if !(self.solver.tol > 0.0) {
            return Err(FitError::Config(format!("tol must be positive, got {}", self.solver.tol)));
        }
        if self.solver.max_iter == 0 {
            return Err(FitError::Config("max_iter must be positive".into()));
        }
        if !(self.stair_factor >= 1.0 && self.stair_factor.is_finite()) {
            return Err(FitError::Config(format!("stair_factor must be >= 1, got {}", self.stair_factor)));
        }
        if self.points < 3 {
            return Err(FitError::Config(format!("points must be at least 3, got {}", self.points)));
        }
        Ok(())
    }
}

/// Resamples every stride and applies stair-ascent flexion scaling.
pub fn prepare_dataset(dataset: &GaitDataset, config: &FitConfig) -> Result<GaitDataset, FitError> {
    let resampled = dataset.map_trials(|t| Ok(resample_cycle(t, config.points)))?;
    Ok(scale_stair_trials(&resampled, config.stair_factor)?)
}

/// Regressor rows and targets of one stride: left-hip rows first, then right.
#[derive(Debug, Clone)]
pub struct TrialBlock {
    pub subject: String,
    pub task: TaskLabel,
    pub stride: usize,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TrialBlock {
    pub fn samples(&self) -> usize {
        self.y.len() / 2
    }

    /// Predicted `(left, right)` series for coefficients `alpha`.
    pub fn predict(&self, alpha: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let u = &self.x * alpha;
        let n = self.samples();
        (u.rows(0, n).iter().copied().collect(), u.rows(n, n).iter().copied().collect())
    }

    pub fn targets(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.samples();
        (self.y.rows(0, n).iter().copied().collect(), self.y.rows(n, n).iter().copied().collect())
    }
}

/// Evaluates the regressor at every training state of every stride.
pub fn regressor_blocks(dataset: &GaitDataset, basis: &BasisSet, biped: &Biped) -> Result<Vec<TrialBlock>, FitError> {
    dataset
        .trials()
        .par_iter()
        .map(|t| {
            let states = states_from_trial(t, biped)?;
            let n = states.len();
            let mut x = DMatrix::zeros(2 * n, basis.len());
            let mut y = DVector::zeros(2 * n);
            for (i, s) in states.iter().enumerate() {
                let phi = basis.regressor(biped, s)?;
                x.row_mut(i).copy_from(&phi.row(0));
                x.row_mut(n + i).copy_from(&phi.row(1));
                y[i] = t.torque_l[i];
                y[n + i] = t.torque_r[i];
            }
            Ok(TrialBlock { subject: t.subject_id.clone(), task: t.task, stride: t.stride, x, y })
        })
        .collect()
}

/// Stacked weighted least-squares problem with an L1 penalty.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Per-row weights.
    pub weights: DVector<f64>,
    pub lambda: f64,
    pub standardize: bool,
    /// Number of data rows; the objective's quadratic part is divided by `2·n_data`.
    pub n_data: usize,
    /// Regressor at `q = p = 0`, as appended in the last two rows when `w₀ > 0`.
    pub zero_pose_row: DMatrix<f64>,
}

impl FitProblem {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, weights: DVector<f64>, lambda: f64) -> Result<Self, FitError> {
        let n = x.nrows();
        let w = x.ncols();
        let p = FitProblem {
            x,
            y,
            weights,
            lambda,
            standardize: true,
            n_data: n,
            zero_pose_row: DMatrix::zeros(2, w),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.x.nrows() == 0 || self.x.ncols() == 0 {
            return Err(FitError::Empty);
        }
        if self.y.len() != self.x.nrows() || self.weights.len() != self.x.nrows() {
            return Err(FitError::Shape(format!(
                "{} regressor rows, {} targets, {} weights",
                self.x.nrows(),
                self.y.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(FitError::Config("row weights must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FitError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(FitError::Shape("non-finite regressor or target entry".into()));
        }
        Ok(())
    }

    pub fn n_bases(&self) -> usize {
        self.x.ncols()
    }

    /// Column scales used for the penalty: weighted RMS, or 1 when not standardizing.
    pub fn column_scales(&self) -> DVector<f64> {
        let total: f64 = self.weights.sum();
        DVector::from_fn(self.n_bases(), |i, _| {
            if !self.standardize {
                return 1.0;
            }
            let ss: f64 = self.x.column(i).iter().zip(self.weights.iter()).map(|(v, w)| w * v * v).sum();
            let s = (ss / total).sqrt();
            if s > 0.0 { s } else { 1.0 }
        })
    }

    fn n(&self) -> f64 {
        self.n_data.max(1) as f64
    }

    /// `(1/2n)·Σ w r² + Λ·Σ sᵢ|αᵢ|`.
    pub fn objective(&self, alpha: &DVector<f64>) -> f64 {
        let r = &self.x * alpha - &self.y;
        let quad: f64 = r.iter().zip(self.weights.iter()).map(|(r, w)| w * r * r).sum::<f64>() / (2.0 * self.n());
        let s = self.column_scales();
        quad + self.lambda * alpha.iter().zip(s.iter()).map(|(a, s)| (a * s).abs()).sum::<f64>()
    }

    /// Smallest Λ for which `α = 0` is optimal.
    pub fn lambda_max(&self) -> f64 {
        Standardized::new(self).b.amax()
    }
}

/// Gram form in standardized coordinates `β = S·α`.
struct Standardized {
    g: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    scales: DVector<f64>,
}

impl Standardized {
    fn new(p: &FitProblem) -> Self {
        let scales = p.column_scales();
        let n = p.n();
        let mut xs = p.x.clone();
        for (j, mut col) in xs.column_iter_mut().enumerate() {
            col /= scales[j];
        }
        let mut xw = xs.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= p.weights[i];
        }
        let g = xw.transpose() * &xs / n;
        let b = xw.transpose() * &p.y / n;
        let c = p.y.iter().zip(p.weights.iter()).map(|(y, w)| w * y * y).sum::<f64>() / (2.0 * n);
        Standardized { g, b, c, scales }
    }

    fn smooth(&self, beta: &DVector<f64>) -> f64 {
        0.5 * beta.dot(&(&self.g * beta)) - self.b.dot(beta) + self.c
    }

    fn grad(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.g * beta - &self.b
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest violation of the subgradient optimality conditions.
fn kkt_residual(grad: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    grad.iter()
        .zip(beta.iter())
        .map(|(&g, &b)| if b != 0.0 { (g + lambda * b.signum()).abs() } else { (g.abs() - lambda).max(0.0) })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub objective: f64,
    pub iterations: usize,
    /// Subgradient optimality residual at the returned point (standardized units).
    pub kkt_residual: f64,
    /// The final point came from an exact solve on the detected support.
    pub polished: bool,
    /// The support system was rank-deficient, so the optimum may not be unique.
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<f64>,
}

/// Minimizer in original units plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub alpha: DVector<f64>,
    pub info: SolveInfo,
}

const RANK_TOL: f64 = 1e-12;

/// Exact solve of the optimality system on the support of `beta` (Cholesky on the Gram form).
fn support_solve(st: &Standardized, beta: &DVector<f64>, lambda: f64) -> Option<(DVector<f64>, Vec<usize>)> {
    // Without a penalty every column is active and signs carry no information.
    let support: Vec<usize> = (0..beta.len()).filter(|&i| lambda == 0.0 || beta[i] != 0.0).collect();
    if support.is_empty() {
        return Some((DVector::zeros(beta.len()), support));
    }
    let k = support.len();
    let ga = DMatrix::from_fn(k, k, |i, j| st.g[(support[i], support[j])]);
    let rhs = DVector::from_fn(k, |i, _| st.b[support[i]] - lambda * beta[support[i]].signum());
    let chol = ga.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
    if lo <= RANK_TOL.sqrt() * hi {
        return None;
    }
    let sol = chol.solve(&rhs);
    let mut out = DVector::zeros(beta.len());
    for (i, &j) in support.iter().enumerate() {
        if lambda > 0.0 && (sol[i] == 0.0 || sol[i].signum() != beta[j].signum()) {
            return None;
        }
        out[j] = sol[i];
    }
    Some((out, support))
}

/// Refines a support solution with a QR factorization of the weighted rows.
fn support_refine(p: &FitProblem, st: &Standardized, support: &[usize], signs: &DVector<f64>) -> Option<DVector<f64>> {
    if support.is_empty() {
        return None;
    }
    let n = p.n();
    let rows = p.x.nrows();
    let k = support.len();
    let xa = DMatrix::from_fn(rows, k, |r, c| {
        let j = support[c];
        p.x[(r, j)] / st.scales[j] * (p.weights[r] / n).sqrt()
    });
    let ya = DVector::from_fn(rows, |r, _| p.y[r] * (p.weights[r] / n).sqrt());
    let qr = xa.qr();
    let r = qr.r();
    let d = r.diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo <= 1e-10 * hi {
        return None;
    }
    let qty = qr.q().transpose() * &ya;
    let sigma = DVector::from_fn(k, |i, _| p.lambda * signs[support[i]].signum());
    // R β = Qᵀy − R⁻ᵀ Λσ
    let shift = r.transpose().solve_lower_triangular(&sigma)?;
    let sol = r.solve_upper_triangular(&(qty - shift))?;
    let mut out = DVector::zeros(st.b.len());
    for (i, &j) in support.iter().enumerate() {
        out[j] = sol[i];
    }
    Some(out)
}

/// Accelerated proximal gradient (monotone FISTA with backtracking) followed by an
/// exact solve on the identified support, certified by the subgradient residual.
pub fn solve_lasso(problem: &FitProblem, config: &SolverConfig) -> Result<LassoSolution, FitError> {
    problem.validate()?;
    let st = Standardized::new(problem);
    let lambda = problem.lambda;
    let w = problem.n_bases();
    let tol = config.tol * st.b.amax().max(1.0);
    let full = |beta: &DVector<f64>| st.smooth(beta) + lambda * beta.abs().sum();
    let certify = |beta: &DVector<f64>| kkt_residual(&st.grad(beta), beta, lambda);

    let mut x = DVector::zeros(w);
    let mut fx = full(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut lip = (st.g.trace() / w as f64).max(f64::MIN_POSITIVE);
    let mut history = Vec::new();
    let mut degenerate = false;
    let finish = |beta: DVector<f64>, iterations: usize, polished: bool, degenerate: bool, history: Vec<f64>| {
        let kkt = certify(&beta);
        let alpha = beta.component_div(&st.scales);
        LassoSolution {
            info: SolveInfo { objective: problem.objective(&alpha), iterations, kkt_residual: kkt, polished, degenerate, history },
            alpha,
        }
    };

    if certify(&x) <= tol {
        return Ok(finish(x, 0, false, false, history));
    }

    for k in 1..=config.max_iter {
        let gy = st.grad(&y);
        let fy = st.smooth(&y);
        let z = loop {
            let z = (&y - &gy / lip).map(|v| soft_threshold(v, lambda / lip));
            let d = &z - &y;
            if st.smooth(&z) <= fy + gy.dot(&d) + 0.5 * lip * d.norm_squared() * (1.0 + 1e-12) + 1e-300 {
                break z;
            }
            lip *= 2.0;
        };
        let fz = full(&z);
        let x_prev = x.clone();
        if fz <= fx {
            x = z.clone();
            fx = fz;
        }
        if config.record_history {
            history.push(fx);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x + (&z - &x) * (t / t_next) + (&x - &x_prev) * ((t - 1.0) / t_next);
        t = t_next;

        if certify(&x) <= tol {
            debug!("lasso converged by proximal gradient after {k} iterations");
            return Ok(finish(x, k, false, degenerate, history));
        }
        if k % 25 == 0 || k == config.max_iter {
            match support_solve(&st, &x, lambda) {
                Some((cand, support)) if certify(&cand) <= tol && full(&cand) <= fx + tol.abs() => {
                    let refined = support_refine(problem, &st, &support, &cand)
                        .filter(|r| lambda == 0.0 || r.iter().zip(cand.iter()).all(|(a, b)| a.signum() == b.signum()))
                        .filter(|r| certify(r) <= tol);
                    let best = refined.unwrap_or(cand);
                    if config.record_history {
                        history.push(full(&best).min(fx));
                    }
                    debug!("lasso support solve certified after {k} iterations");
                    return Ok(finish(best, k, true, false, history));
                }
                None if !x.iter().all(|v| *v == 0.0) => degenerate = true,
                _ => {}
            }
        }
    }
    let residual = certify(&x);
    Err(FitError::NotConverged { iterations: config.max_iter, residual })
}

/// `SIM(A, B) = 100·A·B / (‖A‖‖B‖)`.
pub fn sim_metric(a: &[f64], b: &[f64]) -> Result<f64, FitError> {
    if a.len() != b.len() {
        return Err(FitError::Shape(format!("series lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(FitError::Metric("SIM of a zero-norm series"));
    }
    Ok(100.0 * dot / (na.sqrt() * nb.sqrt()))
}

fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// `VAF(A, B) = 100·(1 − var(A − B)/var(A))` with sample variances.
pub fn vaf_metric(a: &[f64], b: &[f64]) -> Result<f64, FitError> {
    if a.len() != b.len() {
        return Err(FitError::Shape(format!("series lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(FitError::Metric("VAF needs at least two samples"));
    }
    let va = sample_variance(a);
    if va == 0.0 {
        return Err(FitError::Metric("VAF of a constant reference series"));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(100.0 * (1.0 - sample_variance(&diff) / va))
}

/// Stacks blocks plus weighted zero-pose rows.
pub fn assemble_from_blocks(
    blocks: &[&TrialBlock],
    basis: &BasisSet,
    weights: &WeightsConfig,
) -> Result<FitProblem, FitError> {
    weights.validate()?;
    if blocks.is_empty() {
        return Err(FitError::Empty);
    }
    let w = basis.len();
    if let Some(b) = blocks.iter().find(|b| b.x.ncols() != w) {
        return Err(FitError::Shape(format!("block has {} columns, basis has {w}", b.x.ncols())));
    }
    let n_data: usize = blocks.iter().map(|b| b.y.len()).sum();
    let zero_pose_row = basis.regressor_at(&GenCoord::zero(), &Vector5::zeros());
    let extra = if weights.w0 > 0.0 { 2 } else { 0 };
    let rows = n_data + extra;
    let mut x = DMatrix::zeros(rows, w);
    let mut y = DVector::zeros(rows);
    let mut wt = DVector::zeros(rows);
    let mut r = 0;
    for b in blocks {
        let m = b.y.len();
        x.rows_mut(r, m).copy_from(&b.x);
        y.rows_mut(r, m).copy_from(&b.y);
        wt.rows_mut(r, m).fill(weights.task_weight(b.task));
        r += m;
    }
    if extra > 0 {
        for i in 0..2 {
            x.row_mut(r + i).copy_from(&zero_pose_row.row(i));
            wt[r + i] = weights.w0;
        }
    }
    let zero = DMatrix::from_fn(2, w, |i, j| zero_pose_row[(i, j)]);
    let p = FitProblem { x, y, weights: wt, lambda: weights.lambda, standardize: weights.standardize, n_data, zero_pose_row: zero };
    p.validate()?;
    Ok(p)
}

/// Builds the fitting problem for an already prepared dataset.
pub fn assemble_problem(
    dataset: &GaitDataset,
    basis: &BasisSet,
    biped: &Biped,
    weights: &WeightsConfig,
) -> Result<FitProblem, FitError> {
    let blocks = regressor_blocks(dataset, basis, biped)?;
    let refs: Vec<&TrialBlock> = blocks.iter().collect();
    assemble_from_blocks(&refs, basis, weights)
}

/// Per-task summary across subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskLabel,
    pub sim_mean: f64,
    pub sim_sd: f64,
    pub vaf_mean: f64,
    pub vaf_sd: f64,
    pub count: usize,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { sample_variance(x).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Side-averaged SIM and VAF per `(subject, task)`, strides concatenated.
pub fn subject_task_metrics(
    blocks: &[&TrialBlock],
    alpha: &DVector<f64>,
) -> Result<BTreeMap<(String, TaskLabel), (f64, f64)>, FitError> {
    let mut series: BTreeMap<(String, TaskLabel), [Vec<f64>; 4]> = BTreeMap::new();
    for b in blocks {
        let (pl, pr) = b.predict(alpha);
        let (yl, yr) = b.targets();
        let e = series.entry((b.subject.clone(), b.task)).or_default();
        e[0].extend(yl);
        e[1].extend(pl);
        e[2].extend(yr);
        e[3].extend(pr);
    }
    series
        .into_iter()
        .map(|(k, [yl, pl, yr, pr])| {
            let sim = 0.5 * (sim_metric(&yl, &pl)? + sim_metric(&yr, &pr)?);
            let vaf = 0.5 * (vaf_metric(&yl, &pl)? + vaf_metric(&yr, &pr)?);
            Ok((k, (sim, vaf)))
        })
        .collect()
}

fn summarize(per: &BTreeMap<(String, TaskLabel), (f64, f64)>) -> Vec<TaskMetrics> {
    let mut by_task: BTreeMap<TaskLabel, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((_, task), (s, v)) in per {
        let e = by_task.entry(*task).or_default();
        e.0.push(*s);
        e.1.push(*v);
    }
    by_task
        .into_iter()
        .map(|(task, (s, v))| {
            let (sim_mean, sim_sd) = mean_sd(&s);
            let (vaf_mean, vaf_sd) = mean_sd(&v);
            TaskMetrics { task, sim_mean, sim_sd, vaf_mean, vaf_sd, count: s.len() }
        })
        .collect()
}

/// Fitted coefficients with diagnostics and a config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub mode: Mode,
    pub basis_ids: Vec<String>,
    pub alpha: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub optimality_residual: f64,
    pub polished: bool,
    pub degenerate: bool,
    pub config: FitConfig,
    /// Training-set metrics per task, across subjects.
    pub per_task_metrics: Vec<TaskMetrics>,
}

impl FitResult {
    pub fn alpha_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.alpha.clone())
    }
}

fn fit_blocks(blocks: &[&TrialBlock], basis: &BasisSet, config: &FitConfig) -> Result<LassoSolution, FitError> {
    let problem = assemble_from_blocks(blocks, basis, &config.weights)?;
    let sol = solve_lasso(&problem, &config.solver)?;
    if sol.info.degenerate {
        log::warn!("support system is rank-deficient; reporting the limit from zero initialization");
    }
    Ok(sol)
}

/// Fits on all subjects of `dataset` (raw strides; resampling and stair scaling applied here).
pub fn fit(dataset: &GaitDataset, basis: &BasisSet, biped: &Biped, config: &FitConfig) -> Result<(FitResult, Vec<TrialBlock>), FitError> {
    config.validate()?;
    let prepared = prepare_dataset(dataset, config)?;
    let blocks = regressor_blocks(&prepared, basis, biped)?;
    let refs: Vec<&TrialBlock> = blocks.iter().collect();
    let sol = fit_blocks(&refs, basis, config)?;
    let per = subject_task_metrics(&refs, &sol.alpha)?;
    info!("fit {}: objective {:.6e}, {} iterations", basis.mode(), sol.info.objective, sol.info.iterations);
    let result = FitResult {
        mode: basis.mode(),
        basis_ids: basis.ids(),
        alpha: sol.alpha.iter().copied().collect(),
        objective: sol.info.objective,
        iterations: sol.info.iterations,
        optimality_residual: sol.info.kkt_residual,
        polished: sol.info.polished,
        degenerate: sol.info.degenerate,
        config: config.clone(),
        per_task_metrics: summarize(&per),
    };
    Ok((result, blocks))
}

/// One held-out subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out: String,
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub metrics: BTreeMap<TaskLabel, (f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub mode: Mode,
    pub basis_ids: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub per_task: Vec<TaskMetrics>,
}

impl CvReport {
    pub fn task(&self, task: TaskLabel) -> Option<&TaskMetrics> {
        self.per_task.iter().find(|m| m.task == task)
    }
}

/// Leave-one-subject-out cross-validation; folds run in parallel.
pub fn loso_cv(dataset: &GaitDataset, basis: &BasisSet, biped: &Biped, config: &FitConfig) -> Result<CvReport, FitError> {
    config.validate()?;
    let prepared = prepare_dataset(dataset, config)?;
    let blocks = regressor_blocks(&prepared, basis, biped)?;
    loso_cv_blocks(&blocks, basis, config)
}

/// Cross-validation on precomputed blocks.
pub fn loso_cv_blocks(blocks: &[TrialBlock], basis: &BasisSet, config: &FitConfig) -> Result<CvReport, FitError> {
    let mut subjects: Vec<String> = blocks.iter().map(|b| b.subject.clone()).collect();
    subjects.sort();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(FitError::TooFewSubjects(subjects.len()));
    }
    let folds = subjects
        .par_iter()
        .map(|held| {
            let train: Vec<&TrialBlock> = blocks.iter().filter(|b| &b.subject != held).collect();
            let test: Vec<&TrialBlock> = blocks.iter().filter(|b| &b.subject == held).collect();
            for t in &test {
                if !train.iter().any(|b| b.task == t.task) {
                    return Err(FitError::TaskAbsent(t.task.to_string()));
                }
            }
            let sol = fit_blocks(&train, basis, config)?;
            let per = subject_task_metrics(&test, &sol.alpha)?;
            Ok(FoldResult {
                held_out: held.clone(),
                alpha: sol.alpha.iter().copied().collect(),
                iterations: sol.info.iterations,
                metrics: per.into_iter().map(|((_, task), m)| (task, m)).collect(),
            })
        })
        .collect::<Result<Vec<_>, FitError>>()?;
    let mut pooled = BTreeMap::new();
    for f in &folds {
        for (task, m) in &f.metrics {
            pooled.insert((f.held_out.clone(), *task), *m);
        }
    }
    Ok(CvReport { mode: basis.mode(), basis_ids: basis.ids(), per_task: summarize(&pooled), folds })
}

/// Reference mean (SD) per task: SIM PHI, SIM WOP, VAF PHI, VAF WOP.
pub const REFERENCE_TABLE: [(TaskLabel, [(f64, f64); 4]); 8] = [
    (TaskLabel::Lg1_0, [(86.5, 7.9), (82.7, 8.0), (71.4, 17.7), (62.9, 22.1)]),
    (TaskLabel::Lg1_45, [(91.5, 2.5), (89.9, 3.3), (82.5, 4.8), (79.0, 6.1)]),
    (TaskLabel::Ra5_2, [(87.3, 8.5), (83.6, 9.3), (71.2, 12.1), (63.5, 14.9)]),
    (TaskLabel::Ra11, [(89.7, 3.9), (86.2, 5.6), (73.8, 9.1), (71.0, 13.3)]),
    (TaskLabel::Rd5_2, [(84.7, 5.7), (81.3, 6.5), (70.7, 12.8), (64.9, 16.1)]),
    (TaskLabel::Rd11, [(74.6, 11.6), (72.0, 12.7), (52.3, 13.5), (57.8, 9.8)]),
    (TaskLabel::Sa, [(86.2, 11.4), (80.4, 15.2), (62.5, 20.7), (47.2, 35.5)]),
    (TaskLabel::Sd, [(65.6, 16.8), (59.4, 11.0), (55.6, 22.6), (45.6, 21.3)]),
];

pub fn reference_sim(task: TaskLabel, mode: Mode) -> f64 {
    let row = REFERENCE_TABLE.iter().find(|(t, _)| *t == task).expect("every task has a reference row");
    match mode {
        Mode::Phi => row.1[0].0,
        Mode::Wop => row.1[1].0,
    }
}

/// CSV with one row per task and SIM/VAF × PHI/WOP mean and SD columns.
pub fn write_cv_table<W: std::io::Write>(phi: &CvReport, wop: &CvReport, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "task", "sim_phi_mean", "sim_phi_sd", "sim_wop_mean", "sim_wop_sd", "vaf_phi_mean", "vaf_phi_sd",
        "vaf_wop_mean", "vaf_wop_sd",
    ])?;
    for task in TaskLabel::ALL {
        let (p, q) = (phi.task(task), wop.task(task));
        if p.is_none() && q.is_none() {
            continue;
        }
        let cell = |m: Option<&TaskMetrics>, f: fn(&TaskMetrics) -> f64| m.map(|m| format!("{:.4}", f(m))).unwrap_or_default();
        out.write_record([
            task.display_name().to_string(),
            cell(p, |m| m.sim_mean),
            cell(p, |m| m.sim_sd),
            cell(q, |m| m.sim_mean),
            cell(q, |m| m.sim_sd),
            cell(p, |m| m.vaf_mean),
            cell(p, |m| m.vaf_sd),
            cell(q, |m| m.vaf_mean),
            cell(q, |m| m.vaf_sd),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub const DEFAULT_SATURATION: f64 = 12.8;

/// `clamp(u_norm·mass·loa, ±sat)` in Nm.
pub fn command_torque(u_norm: &Vector2<f64>, mass: f64, loa: f64, sat: f64) -> Result<Vector2<f64>, FitError> {
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(FitError::Config(format!("body mass must be positive, got {mass}")));
    }
    if !(0.0..=1.0).contains(&loa) {
        return Err(FitError::Config(format!("level of assistance must lie in [0, 1], got {loa}")));
    }
    if !(sat > 0.0) {
        return Err(FitError::Config(format!("saturation must be positive, got {sat}")));
    }
    Ok(u_norm.map(|u| (u * mass * loa).clamp(-sat, sat)))
}

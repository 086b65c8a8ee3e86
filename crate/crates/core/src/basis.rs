//! Shaping basis functions and the linear-in-coefficients regressor.
//!
//! Each function contributes one 5-vector to the shaping term
//! `−N̂ + J₂M⁻¹p + T_ext` through its channel:
//!
//! * `Potential`: the gradient of a scalar primitive `P(q)`, so that
//!   `N̂ = −Σ αᵢ ∇Pᵢ` and the shaped potential is `V̂ = −Σ αᵢ Pᵢ`.
//! * `Velocity`: `J₂ q̇` with `J₂ = (∇Q)ᵀ − ∇Q` for a vector field `Q(q)`.
//! * `Leak`: rows entered directly into the power-leak input `T_ext`.
//!
//! Admitted functions have zero unactuated rows (`p_x, p_y, φ`), which makes
//! the matching condition hold term by term.

use nalgebra::{Matrix2xX, Matrix5, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

use crate::error::BasisError;
use crate::expr::{Expr, Var};
use crate::model::{Biped, GenCoord, State, DOF, PHI, PX, PY, THETA_L, THETA_R};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Potential,
    Velocity,
    Leak,
}

/// Shaping strategy: without (`Wop`) or with (`Phi`) the global thigh angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Wop,
    Phi,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Wop => "WOP",
            Mode::Phi => "PHI",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wop" => Ok(Mode::Wop),
            "phi" => Ok(Mode::Phi),
            other => Err(format!("unknown mode `{other}` (expected wop or phi)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeRequirement {
    WopCompatible,
    PhiOnly,
}

/// Serializable description of one basis function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDef {
    pub id: String,
    pub channel: Channel,
    /// Inferred from the expressions when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeRequirement>,
    /// Scalar primitive `P(q)` of a potential-channel function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primitive: Option<Expr>,
    /// Vector field `Q(q)` of a velocity-channel function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_field: Option<[Expr; DOF]>,
    /// Explicit interconnection matrix (row-major) of a velocity-channel function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interconnection: Option<Vec<Vec<Expr>>>,
    /// Contribution rows of a leak-channel function; may use rates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<[Expr; DOF]>,
}

impl BasisDef {
    pub fn potential(id: &str, primitive: &str) -> Result<Self, BasisError> {
        Ok(BasisDef {
            id: id.into(),
            channel: Channel::Potential,
            mode: None,
            primitive: Some(primitive.parse()?),
            q_field: None,
            interconnection: None,
            rows: None,
        })
    }

    pub fn velocity(id: &str, q_field: [&str; DOF]) -> Result<Self, BasisError> {
        Ok(BasisDef {
            id: id.into(),
            channel: Channel::Velocity,
            mode: None,
            primitive: None,
            q_field: Some(parse_rows(q_field)?),
            interconnection: None,
            rows: None,
        })
    }

    pub fn leak(id: &str, rows: [&str; DOF]) -> Result<Self, BasisError> {
        Ok(BasisDef {
            id: id.into(),
            channel: Channel::Leak,
            mode: Some(ModeRequirement::PhiOnly),
            primitive: None,
            q_field: None,
            interconnection: None,
            rows: Some(parse_rows(rows)?),
        })
    }

    fn expressions(&self) -> Vec<&Expr> {
        let mut out: Vec<&Expr> = Vec::new();
        out.extend(self.primitive.iter());
        if let Some(q) = &self.q_field {
            out.extend(q.iter());
        }
        if let Some(m) = &self.interconnection {
            out.extend(m.iter().flatten());
        }
        if let Some(r) = &self.rows {
            out.extend(r.iter());
        }
        out
    }

    fn inferred_mode(&self) -> ModeRequirement {
        let phi_dependent = self.expressions().iter().any(|e| {
            e.depends_on(Var::Coord(PHI)) || e.depends_on(Var::Rate(PHI))
        });
        if phi_dependent || self.channel == Channel::Leak {
            ModeRequirement::PhiOnly
        } else {
            ModeRequirement::WopCompatible
        }
    }
}

fn parse_rows(rows: [&str; DOF]) -> Result<[Expr; DOF], BasisError> {
    let mut out: [Expr; DOF] = Default::default();
    for (slot, text) in out.iter_mut().zip(rows) {
        *slot = text.parse()?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Compiled {
    Potential { primitive: Expr, gradient: [Expr; DOF] },
    Velocity { j2: Box<[[Expr; DOF]; DOF]> },
    Leak { rows: [Expr; DOF] },
}

/// A compiled basis function. Construction checks only its shape; compliance
/// is checked when it is admitted into a [`BasisSet`].
#[derive(Debug, Clone)]
pub struct BasisFunction {
    def: BasisDef,
    mode: ModeRequirement,
    compiled: Compiled,
}

fn gradient(e: &Expr) -> [Expr; DOF] {
    let mut g: [Expr; DOF] = Default::default();
    for (k, slot) in g.iter_mut().enumerate() {
        *slot = e.diff(Var::Coord(k));
    }
    g
}

impl BasisFunction {
    pub fn from_def(def: BasisDef) -> Result<Self, BasisError> {
        let reject = |reason: &str| BasisError::NonCompliant { id: def.id.clone(), reason: reason.into() };
        let compiled = match def.channel {
            Channel::Potential => {
                let primitive = def
                    .primitive
                    .clone()
                    .ok_or_else(|| BasisError::MissingPrimitive(def.id.clone()))?;
                if primitive.uses_rates() {
                    return Err(reject("potential primitive may depend on coordinates only"));
                }
                let gradient = gradient(&primitive);
                Compiled::Potential { primitive, gradient }
            }
            Channel::Velocity => {
                let j2 = match (&def.q_field, &def.interconnection) {
                    (Some(q), None) => {
                        if q.iter().any(Expr::uses_rates) {
                            return Err(reject("Q may depend on coordinates only"));
                        }
                        // ∇Q[i][k] = ∂Qᵢ/∂q_k; J₂ = (∇Q)ᵀ − ∇Q.
                        let jac: Vec<[Expr; DOF]> = q.iter().map(gradient).collect();
                        let mut j2: [[Expr; DOF]; DOF] = Default::default();
                        for (i, row) in j2.iter_mut().enumerate() {
                            for (k, slot) in row.iter_mut().enumerate() {
                                *slot = crate::expr::sub(jac[k][i].clone(), jac[i][k].clone());
                            }
                        }
                        j2
                    }
                    (None, Some(m)) => {
                        if m.len() != DOF || m.iter().any(|r| r.len() != DOF) {
                            return Err(reject("interconnection must be 5x5"));
                        }
                        if m.iter().flatten().any(Expr::uses_rates) {
                            return Err(reject("interconnection may depend on coordinates only"));
                        }
                        let mut j2: [[Expr; DOF]; DOF] = Default::default();
                        for (i, row) in j2.iter_mut().enumerate() {
                            for (k, slot) in row.iter_mut().enumerate() {
                                *slot = m[i][k].clone();
                            }
                        }
                        j2
                    }
                    _ => return Err(reject("velocity basis needs exactly one of q_field or interconnection")),
                };
                Compiled::Velocity { j2: Box::new(j2) }
            }
            Channel::Leak => {
                let rows = def.rows.clone().ok_or_else(|| reject("leak basis needs rows"))?;
                Compiled::Leak { rows }
            }
        };
        let mode = def.mode.unwrap_or_else(|| def.inferred_mode());
        Ok(BasisFunction { def, mode, compiled })
    }

    pub fn id(&self) -> &str {
        &self.def.id
    }

    pub fn channel(&self) -> Channel {
        self.def.channel
    }

    pub fn mode_requirement(&self) -> ModeRequirement {
        self.mode
    }

    pub fn def(&self) -> &BasisDef {
        &self.def
    }

    /// Channel contribution at `(q, q̇)`.
    pub fn eval(&self, q: &GenCoord, qdot: &Vector5<f64>) -> Vector5<f64> {
        match &self.compiled {
            Compiled::Potential { gradient, .. } => Vector5::from_fn(|i, _| gradient[i].eval(&q.0, qdot)),
            Compiled::Velocity { .. } => self.j2(q).expect("velocity channel") * qdot,
            Compiled::Leak { rows } => Vector5::from_fn(|i, _| rows[i].eval(&q.0, qdot)),
        }
    }

    /// Scalar primitive of a potential-channel function.
    pub fn primitive(&self, q: &GenCoord) -> Option<f64> {
        match &self.compiled {
            Compiled::Potential { primitive, .. } => Some(primitive.eval(&q.0, &Vector5::zeros())),
            _ => None,
        }
    }

    /// Interconnection matrix of a velocity-channel function.
    pub fn j2(&self, q: &GenCoord) -> Option<Matrix5<f64>> {
        match &self.compiled {
            Compiled::Velocity { j2 } => {
                let zero = Vector5::zeros();
                Some(Matrix5::from_fn(|i, k| j2[i][k].eval(&q.0, &zero)))
            }
            _ => None,
        }
    }
}

/// Ordered, validated set of basis functions; `α` indices bind to this order.
#[derive(Debug, Clone)]
pub struct BasisSet {
    mode: Mode,
    functions: Vec<BasisFunction>,
}

/// Serializable form of a [`BasisSet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisSetFile {
    pub mode: Mode,
    pub functions: Vec<BasisDef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checked_states: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Sampling settings for compliance checks.
#[derive(Debug, Clone, Copy)]
pub struct ValidationConfig {
    pub states: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { states: 1000, seed: 0x5EED }
    }
}

const ZERO_ROW_TOL: f64 = 1e-12;
const SKEW_TOL: f64 = 1e-12;
const FD_TOL: f64 = 1e-6;

fn reduced_coordinate_perturbations(q: &GenCoord) -> [GenCoord; 2] {
    let mut a = *q;
    a.0[PHI] += 0.731;
    a.0[PX] -= 0.3;
    let mut b = *q;
    b.0[PHI] -= 1.17;
    b.0[PY] += 0.4;
    [a, b]
}

fn check_function(f: &BasisFunction, samples: &[(GenCoord, Vector5<f64>)]) -> Option<String> {
    if f.channel() == Channel::Leak && f.mode_requirement() != ModeRequirement::PhiOnly {
        return Some("leak-channel functions are PHI-only".into());
    }
    for (q, qdot) in samples {
        let e = f.eval(q, qdot);
        if !e.iter().all(|x| x.is_finite()) {
            return Some(format!("non-finite contribution at {:?}", q.0.as_slice()));
        }
        let scale = e.amax().max(1.0);
        for row in [PX, PY, PHI] {
            if e[row].abs() > ZERO_ROW_TOL * scale {
                return Some(format!("unactuated row {} is {:.3e} (must be zero)", row + 1, e[row]));
            }
        }
        match f.channel() {
            Channel::Potential => {
                let h = 1e-6;
                for k in [THETA_L, THETA_R] {
                    let mut qp = *q;
                    let mut qm = *q;
                    qp.0[k] += h;
                    qm.0[k] -= h;
                    let fd = (f.primitive(&qp).unwrap() - f.primitive(&qm).unwrap()) / (2.0 * h);
                    if (fd - e[k]).abs() > FD_TOL * e[k].abs().max(1.0) {
                        return Some(format!("row {} disagrees with the primitive gradient", k + 1));
                    }
                }
            }
            Channel::Velocity => {
                let j2 = f.j2(q).unwrap();
                let asym = (j2 + j2.transpose()).amax();
                if asym > SKEW_TOL * j2.amax().max(1.0) {
                    return Some(format!("interconnection is not skew-symmetric (|J2 + J2ᵀ| = {asym:.3e})"));
                }
                let power = qdot.dot(&e);
                if power.abs() > SKEW_TOL * (qdot.norm() * e.norm()).max(1.0) {
                    return Some(format!("velocity contribution does work ({power:.3e} W)"));
                }
            }
            Channel::Leak => {}
        }
        if f.mode_requirement() == ModeRequirement::WopCompatible {
            for moved in reduced_coordinate_perturbations(q) {
                let e2 = f.eval(&moved, qdot);
                if (e2 - e).amax() > ZERO_ROW_TOL * scale {
                    return Some("declared WOP-compatible but depends on φ or the foot position".into());
                }
            }
            let mut qdot2 = *qdot;
            qdot2[PHI] += 0.9;
            qdot2[PX] -= 0.5;
            if (f.eval(q, &qdot2) - e).amax() > ZERO_ROW_TOL * scale {
                return Some("declared WOP-compatible but depends on unactuated rates".into());
            }
        }
    }
    None
}

fn random_coord(rng: &mut ChaCha8Rng) -> GenCoord {
    let h = std::f64::consts::FRAC_PI_2;
    GenCoord::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-h..h),
        rng.gen_range(-h..h),
        rng.gen_range(-h..h),
    )
}

fn report(functions: &[BasisFunction], samples: &[(GenCoord, Vector5<f64>)]) -> ValidationReport {
    ValidationReport {
        checked_states: samples.len(),
        violations: functions
            .iter()
            .filter_map(|f| {
                check_function(f, samples).map(|reason| Violation { id: f.id().to_string(), reason })
            })
            .collect(),
    }
}

/// Randomized compliance check over `(q, q̇)` samples.
pub fn validate_functions(functions: &[BasisFunction], config: ValidationConfig) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples: Vec<_> = (0..config.states)
        .map(|_| {
            let q = random_coord(&mut rng);
            let qdot = Vector5::from_fn(|_, _| rng.gen_range(-5.0..5.0));
            (q, qdot)
        })
        .collect();
    report(functions, &samples)
}

/// Compliance check over random phase-space states of a concrete model.
pub fn validate_basis(basis: &BasisSet, biped: &Biped, config: ValidationConfig) -> Result<ValidationReport, BasisError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity(config.states);
    for _ in 0..config.states {
        let q = random_coord(&mut rng);
        let p = Vector5::from_fn(|_, _| rng.gen_range(-20.0..20.0));
        let qdot = biped.velocity(&State::new(q, p))?;
        samples.push((q, qdot));
    }
    Ok(report(&basis.functions, &samples))
}

impl BasisSet {
    /// Validates and admits `functions` for use in `mode`.
    pub fn new(mode: Mode, functions: Vec<BasisFunction>) -> Result<Self, BasisError> {
        Self::with_validation(mode, functions, ValidationConfig::default())
    }

    pub fn with_validation(
        mode: Mode,
        functions: Vec<BasisFunction>,
        config: ValidationConfig,
    ) -> Result<Self, BasisError> {
        let mut seen = HashSet::new();
        for f in &functions {
            if !seen.insert(f.id().to_string()) {
                return Err(BasisError::DuplicateId(f.id().to_string()));
            }
            if mode == Mode::Wop && f.mode_requirement() == ModeRequirement::PhiOnly {
                return Err(BasisError::ModeMismatch(f.id().to_string()));
            }
        }
        let report = validate_functions(&functions, config);
        if let Some(v) = report.violations.into_iter().next() {
            return Err(BasisError::NonCompliant { id: v.id, reason: v.reason });
        }
        Ok(BasisSet { mode, functions })
    }

    pub fn from_defs(mode: Mode, defs: Vec<BasisDef>) -> Result<Self, BasisError> {
        let functions = defs.into_iter().map(BasisFunction::from_def).collect::<Result<Vec<_>, _>>()?;
        BasisSet::new(mode, functions)
    }

    pub fn from_file(file: BasisSetFile) -> Result<Self, BasisError> {
        BasisSet::from_defs(file.mode, file.functions)
    }

    pub fn to_file(&self) -> BasisSetFile {
        BasisSetFile { mode: self.mode, functions: self.functions.iter().map(|f| f.def.clone()).collect() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn ids(&self) -> Vec<String> {
        self.functions.iter().map(|f| f.id().to_string()).collect()
    }

    /// Keeps the listed ids, in the listed order.
    pub fn select(&self, ids: &[String]) -> Result<BasisSet, BasisError> {
        let functions = ids
            .iter()
            .map(|id| {
                self.functions
                    .iter()
                    .find(|f| f.id() == id)
                    .cloned()
                    .ok_or_else(|| BasisError::UnknownId(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BasisSet { mode: self.mode, functions })
    }

    /// `2 × w` regressor at `(q, q̇)`; column `i` holds the actuated rows of `ξᵢ`.
    pub fn regressor_at(&self, q: &GenCoord, qdot: &Vector5<f64>) -> Matrix2xX<f64> {
        let mut phi = Matrix2xX::zeros(self.functions.len());
        for (i, f) in self.functions.iter().enumerate() {
            let e = f.eval(q, qdot);
            phi[(0, i)] = e[THETA_L];
            phi[(1, i)] = e[THETA_R];
        }
        phi
    }

    pub fn regressor(&self, biped: &Biped, state: &State) -> Result<Matrix2xX<f64>, BasisError> {
        let qdot = biped.velocity(state)?;
        Ok(self.regressor_at(&state.q, &qdot))
    }
}

/// Whether default single-leg functions share one coefficient across both legs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisOptions {
    pub tie_legs: bool,
}

impl Default for BasisOptions {
    fn default() -> Self {
        BasisOptions { tie_legs: true }
    }
}

/// Single-leg term templates; `{t}` is the leg's hip angle, `{g}` its global thigh angle.
const POTENTIAL_TEMPLATES: [(&str, &str); 4] = [
    ("pot_theta", "0.5*{t}^2"),
    ("pot_sin", "-cos({t})"),
    ("pot_sin2", "-0.5*cos(2*{t})"),
    ("pot_cubic", "0.25*{t}^4"),
];

const LEAK_TEMPLATES: [(&str, &str); 3] = [
    ("leak_sin_thigh", "sin({g})"),
    ("leak_sin_trunk", "sin(phi - theta_r)"),
    ("leak_thigh_rate", "{gd}"),
];

struct Leg {
    suffix: &'static str,
    theta: &'static str,
    thigh: &'static str,
    thigh_rate: &'static str,
    row: usize,
}

const LEGS: [Leg; 2] = [
    Leg { suffix: "l", theta: "theta_l", thigh: "phi - theta_r + theta_l", thigh_rate: "dphi - dtheta_r + dtheta_l", row: THETA_L },
    Leg { suffix: "r", theta: "theta_r", thigh: "phi", thigh_rate: "dphi", row: THETA_R },
];

fn fill(template: &str, leg: &Leg) -> String {
    template
        .replace("{t}", leg.theta)
        .replace("{gd}", leg.thigh_rate)
        .replace("{g}", leg.thigh)
}

fn default_defs(mode: Mode, options: BasisOptions) -> Result<Vec<BasisDef>, BasisError> {
    let mut defs = Vec::new();
    for (id, template) in POTENTIAL_TEMPLATES {
        if options.tie_legs {
            let primitive = LEGS.iter().map(|l| format!("({})", fill(template, l))).collect::<Vec<_>>().join(" + ");
            defs.push(BasisDef::potential(id, &primitive)?);
        } else {
            for leg in &LEGS {
                defs.push(BasisDef::potential(&format!("{id}_{}", leg.suffix), &fill(template, leg))?);
            }
        }
    }
    // Skew couplings between the two hips; mirrored copies of the linear one cancel exactly,
    // so velocity-channel functions are never tied.
    defs.push(BasisDef::velocity("vel_theta", ["0", "0", "0", "theta_r", "0"])?);
    defs.push(BasisDef::velocity("vel_sin_l", ["0", "0", "0", "sin(theta_r)", "0"])?);
    defs.push(BasisDef::velocity("vel_sin_r", ["0", "0", "0", "0", "sin(theta_l)"])?);
    if mode == Mode::Phi {
        for (id, template) in LEAK_TEMPLATES {
            if options.tie_legs {
                let mut rows = ["0"; DOF].map(String::from);
                for leg in &LEGS {
                    rows[leg.row] = fill(template, leg);
                }
                defs.push(BasisDef::leak(id, [&rows[0], &rows[1], &rows[2], &rows[3], &rows[4]].map(|s| s.as_str()))?);
            } else {
                for leg in &LEGS {
                    let mut rows = ["0"; DOF].map(String::from);
                    rows[leg.row] = fill(template, leg);
                    defs.push(BasisDef::leak(
                        &format!("{id}_{}", leg.suffix),
                        [&rows[0], &rows[1], &rows[2], &rows[3], &rows[4]].map(|s| s.as_str()),
                    )?);
                }
            }
        }
    }
    Ok(defs)
}

/// The shipped basis family for `mode`, legs tied.
pub fn default_basis(mode: Mode) -> BasisSet {
    default_basis_with(mode, BasisOptions::default())
}

pub fn default_basis_with(mode: Mode, options: BasisOptions) -> BasisSet {
    let defs = default_defs(mode, options).expect("default basis expressions parse");
    BasisSet::from_defs(mode, defs).expect("default basis is compliant")
}

//! Shaping terms, the feasible control law and closed-loop energy bookkeeping.
//!
//! The control law is `u = B†(−N̂ + J₂M⁻¹p + T_ext)` with `B† = (BᵀB)⁻¹Bᵀ`,
//! which for `B = [0; I₂]` simply selects the hip rows.

use nalgebra::{DVector, Matrix5, Vector2, Vector3, Vector5};
use serde::{Deserialize, Serialize};

use crate::basis::{default_basis_with, BasisDef, BasisOptions, BasisSet, Channel, Mode};
use crate::error::{BasisError, ShapingError};
use crate::model::{actuated_rows, embed_actuated, Biped, GenCoord, State, Trajectory};

/// A basis set together with its coefficients.
#[derive(Debug, Clone)]
pub struct ShapingSpec {
    basis: BasisSet,
    alpha: DVector<f64>,
}

/// Shaping terms evaluated at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapingTerms {
    /// Modified gravitational vector `N̂ = ∇V̂`.
    pub n_hat: Vector5<f64>,
    pub j2: Matrix5<f64>,
    /// Power-leak input.
    pub t_ext: Vector5<f64>,
}

impl ShapingTerms {
    /// `−N̂ + J₂ q̇ + T_ext`.
    pub fn shaping_vector(&self, qdot: &Vector5<f64>) -> Vector5<f64> {
        -self.n_hat + self.j2 * qdot + self.t_ext
    }
}

/// JSON form: basis ids and coefficients, plus optional full definitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapingSpecFile {
    pub mode: Mode,
    pub basis_ids: Vec<String>,
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definitions: Option<Vec<BasisDef>>,
}

impl ShapingSpec {
    pub fn new(basis: BasisSet, alpha: DVector<f64>) -> Result<Self, BasisError> {
        if alpha.len() != basis.len() {
            return Err(BasisError::CoefficientLength { expected: basis.len(), got: alpha.len() });
        }
        Ok(ShapingSpec { basis, alpha })
    }

    pub fn zero(basis: BasisSet) -> Self {
        let alpha = DVector::zeros(basis.len());
        ShapingSpec { basis, alpha }
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn mode(&self) -> Mode {
        self.basis.mode()
    }

    /// Same basis, coefficients multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> ShapingSpec {
        ShapingSpec { basis: self.basis.clone(), alpha: &self.alpha * factor }
    }

    pub fn to_file(&self) -> ShapingSpecFile {
        ShapingSpecFile {
            mode: self.mode(),
            basis_ids: self.basis.ids(),
            alpha: self.alpha.iter().copied().collect(),
            definitions: Some(self.basis.to_file().functions),
        }
    }

    /// Resolves definitions if present, otherwise looks the ids up in the default families.
    pub fn from_file(file: ShapingSpecFile) -> Result<Self, BasisError> {
        let basis = match file.definitions {
            Some(defs) => BasisSet::from_defs(file.mode, defs)?.select(&file.basis_ids)?,
            None => {
                let tied = default_basis_with(file.mode, BasisOptions { tie_legs: true });
                match tied.select(&file.basis_ids) {
                    Ok(b) => b,
                    Err(_) => default_basis_with(file.mode, BasisOptions { tie_legs: false }).select(&file.basis_ids)?,
                }
            }
        };
        ShapingSpec::new(basis, DVector::from_vec(file.alpha))
    }

    /// Assembles `N̂`, `J₂` and `T_ext` channel by channel.
    pub fn terms(&self, q: &GenCoord, qdot: &Vector5<f64>) -> ShapingTerms {
        let mut terms = ShapingTerms { n_hat: Vector5::zeros(), j2: Matrix5::zeros(), t_ext: Vector5::zeros() };
        for (f, &a) in self.basis.functions().iter().zip(self.alpha.iter()) {
            if a == 0.0 {
                continue;
            }
            match f.channel() {
                Channel::Potential => terms.n_hat -= a * f.eval(q, qdot),
                Channel::Velocity => terms.j2 += a * f.j2(q).expect("velocity channel"),
                Channel::Leak => terms.t_ext += a * f.eval(q, qdot),
            }
        }
        terms
    }
}

/// Feasible control law `u = B†(−N̂ + J₂M⁻¹p + T_ext)`.
pub fn control_law(spec: &ShapingSpec, biped: &Biped, state: &State) -> Result<Vector2<f64>, ShapingError> {
    let qdot = biped.velocity(state)?;
    Ok(actuated_rows(&spec.terms(&state.q, &qdot).shaping_vector(&qdot)))
}

/// `J₂ = (∇Q)ᵀ − ∇Q`.
pub fn build_j2(q_jacobian: &Matrix5<f64>) -> Matrix5<f64> {
    q_jacobian.transpose() - q_jacobian
}

/// Unactuated matching residual `[I − Z_λ, 0]·(−N̂ + J₂M⁻¹p + T_ext)`.
pub fn matching_residual(biped: &Biped, state: &State, spec: &ShapingSpec) -> Result<Vector3<f64>, ShapingError> {
    let qdot = biped.velocity(state)?;
    let s = spec.terms(&state.q, &qdot).shaping_vector(&qdot);
    let blocks = biped.schur_blocks(&state.q)?;
    let unactuated = Vector3::new(s[0], s[1], s[2]);
    Ok((nalgebra::Matrix3::identity() - blocks.z_lambda) * unactuated)
}

/// GRF of the desired closed-loop system under human torque `v`.
pub fn closed_loop_grf(
    biped: &Biped,
    state: &State,
    spec: &ShapingSpec,
    v: &Vector2<f64>,
) -> Result<Vector2<f64>, ShapingError> {
    let m_inv = biped.mass_matrix_inverse(&state.q)?;
    let qdot = m_inv * state.p;
    let (grad_q, _) = biped.grad_h(state)?;
    let terms = spec.terms(&state.q, &qdot);
    let grad_shaped = grad_q + terms.n_hat;
    let force = grad_shaped - terms.j2 * qdot - embed_actuated(v) - terms.t_ext;
    Ok(biped.lambda_from_parts(&state.q, &m_inv, &qdot, &force)?)
}

/// Shaped potential `V̂ = −Σ αᵢ Pᵢ(q)` over the potential channel.
pub fn shaped_potential(spec: &ShapingSpec, q: &GenCoord) -> Result<f64, ShapingError> {
    let mut v = 0.0;
    for (f, &a) in spec.basis.functions().iter().zip(spec.alpha.iter()) {
        if f.channel() == Channel::Potential {
            let p = f.primitive(q).ok_or_else(|| BasisError::MissingPrimitive(f.id().to_string()))?;
            v -= a * p;
        }
    }
    Ok(v)
}

/// Energy bookkeeping at one trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyAudit {
    pub t: f64,
    pub h_tilde: f64,
    pub port_power_human: f64,
    pub port_power_leak: f64,
    /// Power injected by the interconnection term; zero for skew `J₂`.
    pub port_power_velocity: f64,
    /// `dH̃/dt − (human + leak port power)`, with `dH̃/dt` from finite differences.
    pub balance_residual: f64,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub samples: Vec<EnergyAudit>,
    /// `H̃(T) − H̃(0) − ∫ port power dt` (trapezoid rule).
    pub integrated_residual: f64,
    pub mean_abs_h_tilde: f64,
    pub max_abs_residual: f64,
}

impl AuditReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "H_tilde", "p_human", "p_leak", "residual", "p_velocity"])?;
        for a in &self.samples {
            out.write_record(
                [a.t, a.h_tilde, a.port_power_human, a.port_power_leak, a.balance_residual, a.port_power_velocity]
                    .iter()
                    .map(|x| format!("{x:.12e}")),
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Passivity audit along a trajectory simulated under `u = control_law(spec, ·)`.
///
/// `v` holds the human torque at each logged sample.
pub fn passivity_audit(
    biped: &Biped,
    trajectory: &Trajectory,
    spec: &ShapingSpec,
    v: &[Vector2<f64>],
) -> Result<AuditReport, ShapingError> {
    let n = trajectory.samples.len();
    if n != v.len() {
        return Err(ShapingError::LengthMismatch { trajectory: n, inputs: v.len() });
    }
    if n < 2 {
        return Err(ShapingError::TooShort);
    }
    let mut samples = Vec::with_capacity(n);
    for (s, v) in trajectory.samples.iter().zip(v) {
        let qdot = biped.velocity(&s.state)?;
        let h = biped.hamiltonian(&s.state)?;
        let h_tilde = h + shaped_potential(spec, &s.state.q)?;
        let terms = spec.terms(&s.state.q, &qdot);
        samples.push(EnergyAudit {
            t: s.t,
            h_tilde,
            port_power_human: v.dot(&actuated_rows(&qdot)),
            port_power_leak: qdot.dot(&terms.t_ext),
            port_power_velocity: actuated_rows(&qdot).dot(&actuated_rows(&(terms.j2 * qdot))),
            balance_residual: 0.0,
        });
    }
    for i in 0..n {
        let (a, b) = match i {
            0 => (0, 1),
            i if i == n - 1 => (n - 2, n - 1),
            i => (i - 1, i + 1),
        };
        let dh = (samples[b].h_tilde - samples[a].h_tilde) / (samples[b].t - samples[a].t);
        samples[i].balance_residual = dh - (samples[i].port_power_human + samples[i].port_power_leak);
    }
    let mut work = 0.0;
    for w in samples.windows(2) {
        let p0 = w[0].port_power_human + w[0].port_power_leak;
        let p1 = w[1].port_power_human + w[1].port_power_leak;
        work += 0.5 * (p0 + p1) * (w[1].t - w[0].t);
    }
    let integrated_residual = samples[n - 1].h_tilde - samples[0].h_tilde - work;
    let mean_abs_h_tilde = samples.iter().map(|a| a.h_tilde.abs()).sum::<f64>() / n as f64;
    let max_abs_residual = samples.iter().map(|a| a.balance_residual.abs()).fold(0.0, f64::max);
    Ok(AuditReport { samples, integrated_residual, mean_abs_h_tilde, max_abs_residual })
}

/// Closed-loop torque policy `u = control_law(spec, state)` with a scripted human input.
pub struct ClosedLoop<'a, F> {
    pub biped: &'a Biped,
    pub spec: &'a ShapingSpec,
    pub human: F,
}

impl<F> crate::model::TorquePolicy for ClosedLoop<'_, F>
where
    F: Fn(f64, &State) -> Vector2<f64>,
{
    fn torques(&self, t: f64, state: &State) -> (Vector2<f64>, Vector2<f64>) {
        let u = control_law(self.spec, self.biped, state).unwrap_or_else(|_| Vector2::repeat(f64::NAN));
        (u, (self.human)(t, state))
    }
}

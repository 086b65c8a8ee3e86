//! Planar trunk + two-leg point-footed biped in port-controlled Hamiltonian form.
//!
//! Generalized coordinates are `q = [p_x, p_y, φ, θ_l, θ_r]`: the stance (right)
//! foot position, the right thigh angle measured counterclockwise from the
//! downward vertical, and the two hip angles (thigh relative to trunk, flexion
//! positive). The trunk rotates by `φ − θ_r` and the left thigh by
//! `φ − θ_r + θ_l`, both measured against their upright/hanging rest poses.
//!
//! Every segment COM is written as `foot + Σ sⱼ e(cⱼ·q)` with
//! `e(β) = (sin β, −cos β)`, which gives closed forms for the COM Jacobians and
//! their derivatives, hence for `M(q)` and `∂M/∂qᵢ`.

use nalgebra::{Matrix2, Matrix2x3, Matrix2x5, Matrix3, Matrix3x2, Matrix3x5, Matrix5, Matrix5x2, Vector2, Vector3, Vector5};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::ModelError;

pub const PX: usize = 0;
pub const PY: usize = 1;
pub const PHI: usize = 2;
pub const THETA_L: usize = 3;
pub const THETA_R: usize = 4;

/// Number of generalized coordinates.
pub const DOF: usize = 5;

/// Segment masses (kg), lengths (m), hip-to-COM distances (m) and COM inertias (kg·m²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParamsFile", into = "ModelParamsFile")]
pub struct ModelParams {
    pub m_trunk: f64,
    /// Lumped thigh + shank + foot, per leg.
    pub m_leg: f64,
    pub l_trunk: f64,
    pub l_leg: f64,
    pub c_trunk: f64,
    pub c_leg: f64,
    pub i_trunk: f64,
    pub i_leg: f64,
    pub g: f64,
}

/// On-disk form of [`ModelParams`]; COM positions are stored as fractions of segment length.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelParamsFile {
    pub m_trunk: f64,
    pub m_leg: f64,
    pub l_trunk: f64,
    pub l_leg: f64,
    pub com_frac_trunk: f64,
    pub com_frac_leg: f64,
    pub i_trunk: f64,
    pub i_leg: f64,
    #[serde(default = "default_gravity")]
    pub g: f64,
}

fn default_gravity() -> f64 {
    9.81
}

impl TryFrom<ModelParamsFile> for ModelParams {
    type Error = ModelError;

    fn try_from(f: ModelParamsFile) -> Result<Self, Self::Error> {
        let params = ModelParams {
            m_trunk: f.m_trunk,
            m_leg: f.m_leg,
            l_trunk: f.l_trunk,
            l_leg: f.l_leg,
            c_trunk: f.com_frac_trunk * f.l_trunk,
            c_leg: f.com_frac_leg * f.l_leg,
            i_trunk: f.i_trunk,
            i_leg: f.i_leg,
            g: f.g,
        };
        params.validate()?;
        Ok(params)
    }
}

impl From<ModelParams> for ModelParamsFile {
    fn from(p: ModelParams) -> Self {
        ModelParamsFile {
            m_trunk: p.m_trunk,
            m_leg: p.m_leg,
            l_trunk: p.l_trunk,
            l_leg: p.l_leg,
            com_frac_trunk: p.c_trunk / p.l_trunk,
            com_frac_leg: p.c_leg / p.l_leg,
            i_trunk: p.i_trunk,
            i_leg: p.i_leg,
            g: p.g,
        }
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams::from_anthropometrics(80.0, 1.78)
    }
}

impl ModelParams {
    /// Scales standard segment fractions (head-arms-trunk block and whole leg)
    /// by total body mass (kg) and height (m).
    pub fn from_anthropometrics(body_mass: f64, height: f64) -> Self {
        let l_leg = 0.530 * height;
        let l_trunk = 0.470 * height;
        let m_leg = 0.161 * body_mass;
        let m_trunk = 0.678 * body_mass;
        let gyr_leg = 0.326 * l_leg;
        let gyr_trunk = 0.143 * height;
        ModelParams {
            m_trunk,
            m_leg,
            l_trunk,
            l_leg,
            c_trunk: 0.180 * height,
            c_leg: 0.447 * l_leg,
            i_trunk: m_trunk * gyr_trunk * gyr_trunk,
            i_leg: m_leg * gyr_leg * gyr_leg,
            g: 9.81,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.m_trunk + 2.0 * self.m_leg
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            self.m_trunk,
            self.m_leg,
            self.l_trunk,
            self.l_leg,
            self.c_trunk,
            self.c_leg,
            self.i_trunk,
            self.i_leg,
            self.g,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::InvalidParams("non-finite parameter".into()));
        }
        if self.m_trunk <= 0.0 || self.m_leg <= 0.0 {
            return Err(ModelError::InvalidParams("masses must be strictly positive".into()));
        }
        if self.l_trunk <= 0.0 || self.l_leg <= 0.0 {
            return Err(ModelError::InvalidParams("lengths must be strictly positive".into()));
        }
        if !(0.0..=self.l_trunk).contains(&self.c_trunk) || !(0.0..=self.l_leg).contains(&self.c_leg) {
            return Err(ModelError::InvalidParams(
                "COM offsets must lie within their segment".into(),
            ));
        }
        if self.i_trunk < 0.0 || self.i_leg < 0.0 {
            return Err(ModelError::InvalidParams("inertias must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generalized coordinates `[p_x, p_y, φ, θ_l, θ_r]`. Angles are never wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenCoord(pub Vector5<f64>);

impl GenCoord {
    pub fn new(px: f64, py: f64, phi: f64, theta_l: f64, theta_r: f64) -> Self {
        GenCoord(Vector5::new(px, py, phi, theta_l, theta_r))
    }

    pub fn zero() -> Self {
        GenCoord(Vector5::zeros())
    }

    pub fn px(&self) -> f64 {
        self.0[PX]
    }
    pub fn py(&self) -> f64 {
        self.0[PY]
    }
    pub fn phi(&self) -> f64 {
        self.0[PHI]
    }
    pub fn theta_l(&self) -> f64 {
        self.0[THETA_L]
    }
    pub fn theta_r(&self) -> f64 {
        self.0[THETA_R]
    }

    /// Global trunk angle.
    pub fn trunk_angle(&self) -> f64 {
        self.phi() - self.theta_r()
    }

    /// Global left thigh angle.
    pub fn left_thigh_angle(&self) -> f64 {
        self.phi() - self.theta_r() + self.theta_l()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Phase-space point: coordinates and conjugate momenta `p = M(q) q̇`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: GenCoord,
    pub p: Vector5<f64>,
}

impl State {
    pub fn new(q: GenCoord, p: Vector5<f64>) -> Self {
        State { q, p }
    }

    pub fn at_rest(q: GenCoord) -> Self {
        State { q, p: Vector5::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && self.p.iter().all(|x| x.is_finite())
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q={:?} p={:?}", self.q.0.as_slice(), self.p.as_slice())
    }
}

/// Blocks of the mass-matrix partition used by the matching conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurBlocks {
    pub m1: Matrix3<f64>,
    pub m2: Matrix3x2<f64>,
    pub m4: Matrix2<f64>,
    /// Schur complement of `m4`: `m1 − m2 m4⁻¹ m2ᵀ`.
    pub delta: Matrix3<f64>,
    /// Contact-force gain `(A_c Δ⁻¹ A_cᵀ)⁻¹`.
    pub w: Matrix2<f64>,
    pub z_lambda: Matrix3<f64>,
    pub x_lambda: Matrix5<f64>,
    pub b_lambda: Matrix5x2<f64>,
    pub b_lambda_perp: Matrix3x5<f64>,
}

/// Holonomic stance constraint Jacobian `A = [I₂ | 0₂ₓ₃]`.
pub fn constraint_matrix() -> Matrix2x5<f64> {
    let mut a = Matrix2x5::zeros();
    a[(0, PX)] = 1.0;
    a[(1, PY)] = 1.0;
    a
}

/// Unactuated-coordinate part of the constraint, `A_c = [I₂ | 0₂ₓ₁]`.
pub fn constraint_unactuated() -> Matrix2x3<f64> {
    let mut a = Matrix2x3::zeros();
    a[(0, 0)] = 1.0;
    a[(1, 1)] = 1.0;
    a
}

/// Hip torque mapping `B = [0₂ₓ₃, I₂]ᵀ`.
pub fn input_matrix() -> Matrix5x2<f64> {
    let mut b = Matrix5x2::zeros();
    b[(THETA_L, 0)] = 1.0;
    b[(THETA_R, 1)] = 1.0;
    b
}

/// Left pseudoinverse of [`input_matrix`]; picks the two actuated rows.
pub fn actuated_rows(v: &Vector5<f64>) -> Vector2<f64> {
    Vector2::new(v[THETA_L], v[THETA_R])
}

/// `B·u`.
pub fn embed_actuated(u: &Vector2<f64>) -> Vector5<f64> {
    let mut v = Vector5::zeros();
    v[THETA_L] = u[0];
    v[THETA_R] = u[1];
    v
}

/// One COM offset term `len · e(coeffs · q)`.
#[derive(Debug, Clone, Copy)]
struct OffsetTerm {
    len: f64,
    coeffs: [f64; DOF],
}

impl OffsetTerm {
    fn angle(&self, q: &Vector5<f64>) -> f64 {
        self.coeffs.iter().zip(q.iter()).map(|(c, x)| c * x).sum()
    }
}

#[derive(Debug, Clone)]
struct Segment {
    mass: f64,
    inertia: f64,
    terms: Vec<OffsetTerm>,
    /// Angular velocity `ω = omega · q̇`.
    omega: Vector5<f64>,
}

impl Segment {
    fn com(&self, q: &Vector5<f64>) -> Vector2<f64> {
        let mut r = Vector2::new(q[PX], q[PY]);
        for t in &self.terms {
            let b = t.angle(q);
            r += t.len * Vector2::new(b.sin(), -b.cos());
        }
        r
    }

    fn jacobian(&self, q: &Vector5<f64>) -> Matrix2x5<f64> {
        let mut j = constraint_matrix();
        for t in &self.terms {
            let b = t.angle(q);
            let de = t.len * Vector2::new(b.cos(), b.sin());
            for k in 0..DOF {
                if t.coeffs[k] != 0.0 {
                    j[(0, k)] += de[0] * t.coeffs[k];
                    j[(1, k)] += de[1] * t.coeffs[k];
                }
            }
        }
        j
    }

    /// `∂J/∂q_k`.
    fn jacobian_derivative(&self, q: &Vector5<f64>, k: usize) -> Matrix2x5<f64> {
        let mut dj = Matrix2x5::zeros();
        for t in &self.terms {
            let ck = t.coeffs[k];
            if ck == 0.0 {
                continue;
            }
            let b = t.angle(q);
            let dde = t.len * ck * Vector2::new(-b.sin(), b.cos());
            for m in 0..DOF {
                if t.coeffs[m] != 0.0 {
                    dj[(0, m)] += dde[0] * t.coeffs[m];
                    dj[(1, m)] += dde[1] * t.coeffs[m];
                }
            }
        }
        dj
    }
}

/// Equations of motion for a validated parameter set.
#[derive(Debug, Clone)]
pub struct Biped {
    params: ModelParams,
    segments: [Segment; 3],
}

/// Hip torques `(u, v)` applied during one evaluation of the dynamics.
pub trait TorquePolicy {
    fn torques(&self, t: f64, state: &State) -> (Vector2<f64>, Vector2<f64>);
}

impl<F> TorquePolicy for F
where
    F: Fn(f64, &State) -> (Vector2<f64>, Vector2<f64>),
{
    fn torques(&self, t: f64, state: &State) -> (Vector2<f64>, Vector2<f64>) {
        self(t, state)
    }
}

/// Constant torques held over the step.
#[derive(Debug, Clone, Copy)]
pub struct HeldTorques {
    pub u: Vector2<f64>,
    pub v: Vector2<f64>,
}

impl TorquePolicy for HeldTorques {
    fn torques(&self, _t: f64, _state: &State) -> (Vector2<f64>, Vector2<f64>) {
        (self.u, self.v)
    }
}

/// Result of comparing two independent kinetic-energy computations.
#[derive(Debug, Clone, Copy)]
pub struct KineticEnergyCheck {
    pub via_mass_matrix: f64,
    pub via_segments: f64,
    pub rel_discrepancy: f64,
}

/// One logged point of a simulated trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub t: f64,
    pub state: State,
    pub u: Vector2<f64>,
    pub v: Vector2<f64>,
    pub lambda: Vector2<f64>,
    pub h: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub const CSV_HEADER: [&'static str; 18] = [
        "t", "q_px", "q_py", "q_phi", "q_theta_l", "q_theta_r", "p_px", "p_py", "p_phi",
        "p_theta_l", "p_theta_r", "u_l", "u_r", "v_l", "v_r", "lambda_x", "lambda_y", "H",
    ];

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        for s in &self.samples {
            let mut row = Vec::with_capacity(18);
            row.push(s.t);
            row.extend(s.state.q.0.iter());
            row.extend(s.state.p.iter());
            row.extend(s.u.iter());
            row.extend(s.v.iter());
            row.extend(s.lambda.iter());
            row.push(s.h);
            out.write_record(row.iter().map(|x| format!("{x:.12e}")))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn mirror_upper(m: &mut Matrix5<f64>) {
    for i in 0..DOF {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
}

fn cholesky_inverse(m: &Matrix5<f64>, context: &'static str) -> Result<Matrix5<f64>, ModelError> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or(ModelError::NotPositiveDefinite(context))
}

impl Biped {
    pub fn new(params: ModelParams) -> Result<Self, ModelError> {
        params.validate()?;
        let p = params;
        let phi = [0.0, 0.0, 1.0, 0.0, 0.0];
        let trunk = [0.0, 0.0, 1.0, 0.0, -1.0];
        let left = [0.0, 0.0, 1.0, 1.0, -1.0];
        let segments = [
            Segment {
                mass: p.m_trunk,
                inertia: p.i_trunk,
                terms: vec![
                    OffsetTerm { len: -p.l_leg, coeffs: phi },
                    OffsetTerm { len: -p.c_trunk, coeffs: trunk },
                ],
                omega: Vector5::from(trunk),
            },
            Segment {
                mass: p.m_leg,
                inertia: p.i_leg,
                terms: vec![OffsetTerm { len: -(p.l_leg - p.c_leg), coeffs: phi }],
                omega: Vector5::from(phi),
            },
            Segment {
                mass: p.m_leg,
                inertia: p.i_leg,
                terms: vec![
                    OffsetTerm { len: -p.l_leg, coeffs: phi },
                    OffsetTerm { len: p.c_leg, coeffs: left },
                ],
                omega: Vector5::from(left),
            },
        ];
        Ok(Biped { params, segments })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Hip joint position.
    pub fn hip(&self, q: &GenCoord) -> Vector2<f64> {
        let phi = q.phi();
        Vector2::new(q.px() - self.params.l_leg * phi.sin(), q.py() + self.params.l_leg * phi.cos())
    }

    /// COM positions of trunk, right (stance) leg and left leg.
    pub fn segment_coms(&self, q: &GenCoord) -> [Vector2<f64>; 3] {
        [self.segments[0].com(&q.0), self.segments[1].com(&q.0), self.segments[2].com(&q.0)]
    }

    pub fn mass_matrix(&self, q: &GenCoord) -> Matrix5<f64> {
        let mut m = Matrix5::zeros();
        for s in &self.segments {
            let j = s.jacobian(&q.0);
            m += s.mass * j.transpose() * j + s.inertia * s.omega * s.omega.transpose();
        }
        mirror_upper(&mut m);
        m
    }

    /// `∂M/∂q_k` for every coordinate.
    pub fn mass_matrix_derivatives(&self, q: &GenCoord) -> [Matrix5<f64>; DOF] {
        let mut out = [Matrix5::zeros(); DOF];
        for s in &self.segments {
            let j = s.jacobian(&q.0);
            for (k, dm) in out.iter_mut().enumerate().skip(PHI) {
                let dj = s.jacobian_derivative(&q.0, k);
                let prod = dj.transpose() * j;
                *dm += s.mass * (prod + prod.transpose());
            }
        }
        for dm in out.iter_mut() {
            mirror_upper(dm);
        }
        out
    }

    pub fn mass_matrix_inverse(&self, q: &GenCoord) -> Result<Matrix5<f64>, ModelError> {
        cholesky_inverse(&self.mass_matrix(q), "mass matrix")
    }

    pub fn velocity(&self, state: &State) -> Result<Vector5<f64>, ModelError> {
        Ok(self.mass_matrix_inverse(&state.q)? * state.p)
    }

    /// State with momenta `M(q) q̇`.
    pub fn state_from_velocity(&self, q: GenCoord, qdot: Vector5<f64>) -> State {
        State { q, p: self.mass_matrix(&q) * qdot }
    }

    pub fn potential_energy(&self, q: &GenCoord) -> f64 {
        self.segments
            .iter()
            .map(|s| s.mass * self.params.g * s.com(&q.0)[1])
            .sum()
    }

    pub fn grad_potential(&self, q: &GenCoord) -> Vector5<f64> {
        let mut g = Vector5::zeros();
        for s in &self.segments {
            let j = s.jacobian(&q.0);
            g += s.mass * self.params.g * j.row(1).transpose();
        }
        g
    }

    pub fn kinetic_energy(&self, state: &State) -> Result<f64, ModelError> {
        let qdot = self.velocity(state)?;
        Ok(0.5 * state.p.dot(&qdot))
    }

    pub fn hamiltonian(&self, state: &State) -> Result<f64, ModelError> {
        Ok(self.kinetic_energy(state)? + self.potential_energy(&state.q))
    }

    /// `∇_q H` given the generalized velocity `q̇ = M⁻¹p`.
    fn grad_q_from_velocity(&self, q: &GenCoord, qdot: &Vector5<f64>) -> Vector5<f64> {
        let dm = self.mass_matrix_derivatives(q);
        let mut g = self.grad_potential(q);
        for k in PHI..DOF {
            g[k] -= 0.5 * qdot.dot(&(dm[k] * qdot));
        }
        g
    }

    /// `(∇_q H, ∇_p H)`.
    pub fn grad_h(&self, state: &State) -> Result<(Vector5<f64>, Vector5<f64>), ModelError> {
        let qdot = self.velocity(state)?;
        Ok((self.grad_q_from_velocity(&state.q, &qdot), qdot))
    }

    /// Kinetic energy via `M(q)` and via explicit per-segment COM velocities.
    pub fn kinetic_energy_check(&self, state: &State) -> Result<KineticEnergyCheck, ModelError> {
        let qdot = self.velocity(state)?;
        let via_mass_matrix = 0.5 * qdot.dot(&(self.mass_matrix(&state.q) * qdot));

        let p = &self.params;
        let q = &state.q;
        let (phi, psi, gamma) = (q.phi(), q.trunk_angle(), q.left_thigh_angle());
        let dphi = qdot[PHI];
        let dpsi = dphi - qdot[THETA_R];
        let dgamma = dpsi + qdot[THETA_L];
        let v_foot = Vector2::new(qdot[PX], qdot[PY]);
        let along = |a: f64| Vector2::new(a.cos(), a.sin());
        let v_hip = v_foot - p.l_leg * dphi * along(phi);
        let v_right = v_foot - (p.l_leg - p.c_leg) * dphi * along(phi);
        let v_trunk = v_hip - p.c_trunk * dpsi * along(psi);
        let v_left = v_hip + p.c_leg * dgamma * along(gamma);
        let via_segments = 0.5
            * (p.m_trunk * v_trunk.norm_squared()
                + p.m_leg * v_right.norm_squared()
                + p.m_leg * v_left.norm_squared()
                + p.i_trunk * dpsi * dpsi
                + p.i_leg * dphi * dphi
                + p.i_leg * dgamma * dgamma);
        let scale = via_mass_matrix.abs().max(via_segments.abs());
        let rel_discrepancy = if scale == 0.0 {
            0.0
        } else {
            (via_mass_matrix - via_segments).abs() / scale
        };
        Ok(KineticEnergyCheck { via_mass_matrix, via_segments, rel_discrepancy })
    }

    pub fn schur_blocks(&self, q: &GenCoord) -> Result<SchurBlocks, ModelError> {
        let m = self.mass_matrix(q);
        let m1: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let m2: Matrix3x2<f64> = m.fixed_view::<3, 2>(0, 3).into_owned();
        let m4: Matrix2<f64> = m.fixed_view::<2, 2>(3, 3).into_owned();
        let m4_inv = m4.try_inverse().ok_or(ModelError::SingularBlock("M4"))?;
        let delta = m1 - m2 * m4_inv * m2.transpose();
        let delta_inv = delta.try_inverse().ok_or(ModelError::SingularBlock("Schur complement"))?;
        let a_c = constraint_unactuated();
        let w = (a_c * delta_inv * a_c.transpose())
            .try_inverse()
            .ok_or(ModelError::SingularBlock("W"))?;
        let z_lambda = a_c.transpose() * w * a_c * delta_inv;
        let coupling = z_lambda * m2 * m4_inv;

        let mut x_lambda = Matrix5::identity();
        x_lambda.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() - z_lambda));
        x_lambda.fixed_view_mut::<3, 2>(0, 3).copy_from(&coupling);

        let mut b_lambda = Matrix5x2::zeros();
        b_lambda.fixed_view_mut::<3, 2>(0, 0).copy_from(&coupling);
        b_lambda.fixed_view_mut::<2, 2>(3, 0).copy_from(&Matrix2::identity());

        let mut b_lambda_perp = Matrix3x5::zeros();
        b_lambda_perp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        b_lambda_perp.fixed_view_mut::<3, 2>(0, 3).copy_from(&(-coupling));

        Ok(SchurBlocks { m1, m2, m4, delta, w, z_lambda, x_lambda, b_lambda, b_lambda_perp })
    }

    /// Ground reaction force keeping `A q̈ = 0` under generalized force `tau`.
    pub fn grf_lambda(&self, state: &State, tau: &Vector5<f64>) -> Result<Vector2<f64>, ModelError> {
        let m_inv = self.mass_matrix_inverse(&state.q)?;
        let qdot = m_inv * state.p;
        let grad_q = self.grad_q_from_velocity(&state.q, &qdot);
        self.lambda_from_parts(&state.q, &m_inv, &qdot, &(grad_q - tau))
    }

    /// `λ = W A M⁻¹ (Σₖ q̇ₖ ∂M/∂qₖ q̇ + f)` with `W = (A M⁻¹ Aᵀ)⁻¹`.
    pub(crate) fn lambda_from_parts(
        &self,
        q: &GenCoord,
        m_inv: &Matrix5<f64>,
        qdot: &Vector5<f64>,
        force: &Vector5<f64>,
    ) -> Result<Vector2<f64>, ModelError> {
        let a = constraint_matrix();
        let dm = self.mass_matrix_derivatives(q);
        let mut convective = Vector5::zeros();
        for (k, dmk) in dm.iter().enumerate() {
            if qdot[k] != 0.0 {
                convective += qdot[k] * dmk * qdot;
            }
        }
        let w = (a * m_inv * a.transpose())
            .try_inverse()
            .ok_or(ModelError::SingularBlock("W"))?;
        Ok(w * a * m_inv * (convective + force))
    }

    /// Full-coordinate multiplier form: returns `(q̇, ṗ, λ)`.
    pub fn full_dynamics(
        &self,
        state: &State,
        tau: &Vector5<f64>,
    ) -> Result<(Vector5<f64>, Vector5<f64>, Vector2<f64>), ModelError> {
        let m_inv = self.mass_matrix_inverse(&state.q)?;
        let qdot = m_inv * state.p;
        let grad_q = self.grad_q_from_velocity(&state.q, &qdot);
        let lambda = self.lambda_from_parts(&state.q, &m_inv, &qdot, &(grad_q - tau))?;
        let pdot = -grad_q + tau + constraint_matrix().transpose() * lambda;
        Ok((qdot, pdot, lambda))
    }

    /// `q̈` implied by `(q̇, ṗ)`: `d/dt(M⁻¹p) = −M⁻¹ (Σₖ q̇ₖ ∂M/∂qₖ) q̇ + M⁻¹ ṗ`.
    pub fn acceleration(
        &self,
        q: &GenCoord,
        qdot: &Vector5<f64>,
        pdot: &Vector5<f64>,
    ) -> Result<Vector5<f64>, ModelError> {
        let m_inv = self.mass_matrix_inverse(q)?;
        let dm = self.mass_matrix_derivatives(q);
        let mut mdot = Matrix5::zeros();
        for (k, dmk) in dm.iter().enumerate() {
            mdot += qdot[k] * dmk;
        }
        Ok(m_inv * (pdot - mdot * qdot))
    }

    /// Reduced stance coordinates `(φ, θ_l, θ_r)` with the foot pinned.
    /// Returns `(ṡ, ṗ_r, u, v, p_full)`.
    fn reduced_rhs<P: TorquePolicy + ?Sized>(
        &self,
        t: f64,
        q: &GenCoord,
        p_red: &Vector3<f64>,
        policy: &P,
    ) -> Result<(Vector3<f64>, Vector3<f64>, Vector2<f64>, Vector2<f64>, Vector5<f64>), ModelError> {
        let m = self.mass_matrix(q);
        let m_red: Matrix3<f64> = m.fixed_view::<3, 3>(PHI, PHI).into_owned();
        let sdot = m_red
            .cholesky()
            .ok_or(ModelError::NotPositiveDefinite("reduced mass matrix"))?
            .solve(p_red);
        let mut qdot = Vector5::zeros();
        qdot.fixed_rows_mut::<3>(PHI).copy_from(&sdot);
        let p_full = m * qdot;
        let (u, v) = policy.torques(t, &State { q: *q, p: p_full });
        let grad_q = self.grad_q_from_velocity(q, &qdot);
        let tau = embed_actuated(&(u + v));
        let pdot: Vector3<f64> = (tau - grad_q).fixed_rows::<3>(PHI).into_owned();
        Ok((sdot, pdot, u, v, p_full))
    }

    /// Consistent stance state: `p_x, p_y` velocities zeroed, `p[2..5]` kept as reduced momenta.
    pub fn project_to_stance(&self, state: &State) -> Result<State, ModelError> {
        let m = self.mass_matrix(&state.q);
        let m_red: Matrix3<f64> = m.fixed_view::<3, 3>(PHI, PHI).into_owned();
        let p_red: Vector3<f64> = state.p.fixed_rows::<3>(PHI).into_owned();
        let sdot = m_red
            .cholesky()
            .ok_or(ModelError::NotPositiveDefinite("reduced mass matrix"))?
            .solve(&p_red);
        let mut qdot = Vector5::zeros();
        qdot.fixed_rows_mut::<3>(PHI).copy_from(&sdot);
        Ok(State { q: state.q, p: m * qdot })
    }

    /// One RK4 step of the stance dynamics with the policy evaluated at every stage.
    pub fn step_with<P: TorquePolicy + ?Sized>(
        &self,
        t: f64,
        state: &State,
        dt: f64,
        policy: &P,
    ) -> Result<State, ModelError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ModelError::InvalidStep(dt));
        }
        let q0 = state.q;
        let p0: Vector3<f64> = state.p.fixed_rows::<3>(PHI).into_owned();
        let shift = |ds: &Vector3<f64>| {
            let mut q = q0;
            for i in 0..3 {
                q.0[PHI + i] += ds[i];
            }
            q
        };
        let (k1s, k1p, ..) = self.reduced_rhs(t, &q0, &p0, policy)?;
        let (k2s, k2p, ..) =
            self.reduced_rhs(t + 0.5 * dt, &shift(&(0.5 * dt * k1s)), &(p0 + 0.5 * dt * k1p), policy)?;
        let (k3s, k3p, ..) =
            self.reduced_rhs(t + 0.5 * dt, &shift(&(0.5 * dt * k2s)), &(p0 + 0.5 * dt * k2p), policy)?;
        let (k4s, k4p, ..) = self.reduced_rhs(t + dt, &shift(&(dt * k3s)), &(p0 + dt * k3p), policy)?;
        let ds = dt / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
        let dp = dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        let q1 = shift(&ds);
        let mut next = State { q: q1, p: Vector5::zeros() };
        next.p.fixed_rows_mut::<3>(PHI).copy_from(&(p0 + dp));
        if !next.is_finite() {
            return Err(ModelError::IntegrationBlowUp { t: t + dt });
        }
        let next = self.project_to_stance(&next)?;
        if !next.is_finite() {
            return Err(ModelError::IntegrationBlowUp { t: t + dt });
        }
        Ok(next)
    }

    /// One step with `u` and `v` held constant.
    pub fn step(&self, state: &State, u: Vector2<f64>, v: Vector2<f64>, dt: f64) -> Result<State, ModelError> {
        self.step_with(0.0, state, dt, &HeldTorques { u, v })
    }

    fn sample<P: TorquePolicy + ?Sized>(&self, t: f64, state: &State, policy: &P) -> Result<Sample, ModelError> {
        let (u, v) = policy.torques(t, state);
        let tau = embed_actuated(&(u + v));
        let lambda = self.grf_lambda(state, &tau)?;
        let h = self.hamiltonian(state)?;
        Ok(Sample { t, state: *state, u, v, lambda, h })
    }

    /// Integrates `steps` RK4 steps from `initial`, logging every `log_every`-th state.
    pub fn simulate<P: TorquePolicy + ?Sized>(
        &self,
        initial: &State,
        dt: f64,
        steps: usize,
        log_every: usize,
        policy: &P,
    ) -> Result<Trajectory, ModelError> {
        let log_every = log_every.max(1);
        let mut state = self.project_to_stance(initial)?;
        let mut traj = Trajectory { samples: Vec::with_capacity(steps / log_every + 2) };
        traj.samples.push(self.sample(0.0, &state, policy)?);
        for i in 0..steps {
            let t = i as f64 * dt;
            state = self.step_with(t, &state, dt, policy)?;
            if (i + 1) % log_every == 0 || i + 1 == steps {
                traj.samples.push(self.sample((i + 1) as f64 * dt, &state, policy)?);
            }
        }
        Ok(traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn biped() -> Biped {
        Biped::new(ModelParams::default()).unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng) -> GenCoord {
        let h = std::f64::consts::FRAC_PI_2;
        GenCoord::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-h..h),
            rng.gen_range(-h..h),
            rng.gen_range(-h..h),
        )
    }

    fn random_state(rng: &mut ChaCha8Rng) -> State {
        let q = random_q(rng);
        let p = Vector5::from_fn(|_, _| rng.gen_range(-20.0..20.0));
        State::new(q, p)
    }

    fn rel_err(a: &Vector5<f64>, b: &Vector5<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1.0)
    }

    #[test]
    fn params_validation() {
        let mut p = ModelParams::default();
        assert!(p.validate().is_ok());
        p.c_leg = p.l_leg * 1.1;
        assert!(Biped::new(p).is_err());
        let mut p = ModelParams::default();
        p.m_leg = 0.0;
        assert!(p.validate().is_err());
        let mut p = ModelParams::default();
        p.i_trunk = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn params_json_uses_com_fractions() {
        let p = ModelParams::default();
        let json = serde_json::to_value(p).unwrap();
        assert!(json.get("com_frac_leg").is_some());
        let back: ModelParams = serde_json::from_value(json).unwrap();
        assert!((back.c_leg - p.c_leg).abs() < 1e-12);
        let bad = serde_json::json!({
            "m_trunk": 50.0, "m_leg": -1.0, "l_trunk": 0.8, "l_leg": 0.9,
            "com_frac_trunk": 0.4, "com_frac_leg": 0.45, "i_trunk": 2.0, "i_leg": 0.5
        });
        assert!(serde_json::from_value::<ModelParams>(bad).is_err());
    }

    #[test]
    fn mass_matrix_structure() {
        let b = biped();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = random_q(&mut rng);
            let m = b.mass_matrix(&q);
            assert_eq!(m, m.transpose());
            assert_eq!(m[(0, 0)], b.params().total_mass());
            assert!(m.cholesky().is_some());
            let eig = m.symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e > 0.0));
            let mut shifted = q;
            shifted.0[PX] += 3.0;
            shifted.0[PY] -= 2.0;
            assert_eq!(m, b.mass_matrix(&shifted));
        }
    }

    #[test]
    fn mass_matrix_derivative_matches_finite_difference() {
        let b = biped();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = random_q(&mut rng);
            let dm = b.mass_matrix_derivatives(&q);
            for k in 0..DOF {
                let h = 1e-6;
                let mut qp = q;
                let mut qm = q;
                qp.0[k] += h;
                qm.0[k] -= h;
                let fd = (b.mass_matrix(&qp) - b.mass_matrix(&qm)) / (2.0 * h);
                assert!((fd - dm[k]).amax() < 1e-6, "k={k}");
            }
        }
    }

    #[test]
    fn kinetic_energy_two_routes() {
        let b = biped();
        let zero = b.kinetic_energy_check(&State::at_rest(GenCoord::new(0.1, 0.0, 0.3, -0.2, 0.4))).unwrap();
        assert_eq!(zero.via_mass_matrix, 0.0);
        assert_eq!(zero.via_segments, 0.0);

        let q = GenCoord::zero();
        let s = b.state_from_velocity(q, Vector5::new(1.0, 0.0, 0.0, 0.0, 0.0));
        let ke = b.kinetic_energy_check(&s).unwrap();
        let expected = 0.5 * b.params().total_mass();
        assert!((ke.via_mass_matrix - expected).abs() < 1e-10);
        assert!((ke.via_segments - expected).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = random_state(&mut rng);
            assert!(b.kinetic_energy_check(&s).unwrap().rel_discrepancy < 1e-10);
        }
    }

    #[test]
    fn potential_energy_properties() {
        let b = biped();
        let q = GenCoord::new(0.0, 0.0, 0.2, 0.1, -0.3);
        let mut up = q;
        up.0[PY] += 0.25;
        let dv = b.potential_energy(&up) - b.potential_energy(&q);
        let expected = b.params().total_mass() * b.params().g * 0.25;
        assert!((dv - expected).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let q = random_q(&mut rng);
            let g = b.grad_potential(&q);
            assert_eq!(g[PX], 0.0);
            let h = 1e-6;
            let fd = Vector5::from_fn(|k, _| {
                let mut qp = q;
                let mut qm = q;
                qp.0[k] += h;
                qm.0[k] -= h;
                (b.potential_energy(&qp) - b.potential_energy(&qm)) / (2.0 * h)
            });
            assert!(rel_err(&g, &fd) < 1e-6);
        }
    }

    #[test]
    fn grad_h_cases() {
        let b = biped();
        let q = GenCoord::new(0.3, 0.1, 0.25, -0.4, 0.2);
        let (gq, gp) = b.grad_h(&State::at_rest(q)).unwrap();
        assert_eq!(gp, Vector5::zeros());
        assert_eq!(gq, b.grad_potential(&q));
        assert_eq!(gq[PX], 0.0);
    }

    #[test]
    fn constraint_matrix_shape() {
        let a = constraint_matrix();
        let qdot = Vector5::new(1.5, -2.0, 3.0, 4.0, 5.0);
        assert_eq!(a * qdot, Vector2::new(1.5, -2.0));
        assert_eq!(a * Vector5::new(0.0, 0.0, 1.0, 1.0, 1.0), Vector2::zeros());
        assert_eq!(a.rank(1e-12), 2);
    }

    #[test]
    fn schur_identities() {
        let b = biped();
        let a = constraint_matrix();
        let bm = input_matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = random_q(&mut rng);
            let s = b.schur_blocks(&q).unwrap();
            assert!((s.b_lambda_perp * s.b_lambda).amax() < 1e-12);
            let m = b.mass_matrix(&q);
            let det = m.determinant();
            assert!((det - s.m4.determinant() * s.delta.determinant()).abs() / det.abs() < 1e-10);
            assert!(s.delta.cholesky().is_some());
            // X_λ from its definition I − AᵀWA M⁻¹ agrees with the block form.
            let m_inv = m.try_inverse().unwrap();
            let w_def = (a * m_inv * a.transpose()).try_inverse().unwrap();
            assert!((w_def - s.w).amax() / s.w.amax() < 1e-10);
            let x_def = Matrix5::identity() - a.transpose() * w_def * a * m_inv;
            assert!((x_def - s.x_lambda).amax() < 1e-10);
            assert_eq!(x_def.fixed_view::<2, 3>(3, 0).into_owned(), nalgebra::Matrix2x3::zeros());
            assert_eq!(x_def.fixed_view::<2, 2>(3, 3).into_owned(), Matrix2::identity());
            assert!((s.x_lambda * bm - s.b_lambda).amax() < 1e-12);
            // Z_λ is a projector onto the contact directions.
            assert!((s.z_lambda * s.z_lambda - s.z_lambda).amax() < 1e-10);
        }
    }

    #[test]
    fn grf_static_standing() {
        let b = biped();
        let q = GenCoord::zero();
        let state = State::at_rest(q);
        let (gq, _) = b.grad_h(&state).unwrap();
        let tau = embed_actuated(&actuated_rows(&gq));
        let lambda = b.grf_lambda(&state, &tau).unwrap();
        let weight = b.params().total_mass() * b.params().g;
        assert!((lambda[1] - weight).abs() / weight < 1e-9);
        assert!(lambda[0].abs() < 1e-9 * weight);
    }

    #[test]
    fn grf_matches_direct_static_solve() {
        let b = biped();
        let a = constraint_matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let q = random_q(&mut rng);
            let lambda = b.grf_lambda(&State::at_rest(q), &Vector5::zeros()).unwrap();
            let m_inv = b.mass_matrix(&q).try_inverse().unwrap();
            let direct = (a * m_inv * a.transpose())
                .lu()
                .solve(&(a * m_inv * b.grad_potential(&q)))
                .unwrap();
            assert!((lambda - direct).amax() < 1e-9 * direct.amax().max(1.0));
        }
    }

    #[test]
    fn full_dynamics_keeps_contact_acceleration_zero() {
        let b = biped();
        let a = constraint_matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s = b.project_to_stance(&random_state(&mut rng)).unwrap();
            let tau = embed_actuated(&Vector2::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)));
            let (qdot, pdot, _) = b.full_dynamics(&s, &tau).unwrap();
            let qddot = b.acceleration(&s.q, &qdot, &pdot).unwrap();
            assert!((a * qddot).amax() < 1e-8);
        }
    }

    #[test]
    fn reduced_step_agrees_with_full_multiplier_form() {
        let b = biped();
        let s0 = b.state_from_velocity(GenCoord::new(0.0, 0.0, 0.1, 0.2, -0.1), Vector5::new(0.0, 0.0, 0.3, -0.5, 0.2));
        let tau_hip = Vector2::new(4.0, -3.0);
        let tau = embed_actuated(&tau_hip);
        let dt = 1e-3;
        let mut reduced = s0;
        let mut full = s0;
        for _ in 0..200 {
            reduced = b.step(&reduced, tau_hip, Vector2::zeros(), dt).unwrap();
            // RK4 on the full 10-dimensional multiplier system.
            let f = |s: &State| {
                let (qd, pd, _) = b.full_dynamics(s, &tau).unwrap();
                (qd, pd)
            };
            let add = |s: &State, k: &(Vector5<f64>, Vector5<f64>), h: f64| {
                State::new(GenCoord(s.q.0 + h * k.0), s.p + h * k.1)
            };
            let k1 = f(&full);
            let k2 = f(&add(&full, &k1, 0.5 * dt));
            let k3 = f(&add(&full, &k2, 0.5 * dt));
            let k4 = f(&add(&full, &k3, dt));
            full = State::new(
                GenCoord(full.q.0 + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0)),
                full.p + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
            );
        }
        assert!((reduced.q.0 - full.q.0).amax() < 1e-8);
        assert!((reduced.p - full.p).amax() < 1e-7);
    }

    #[test]
    fn equilibrium_stays_put() {
        let b = biped();
        let s0 = State::at_rest(GenCoord::zero());
        let (gq, _) = b.grad_h(&s0).unwrap();
        let u = actuated_rows(&gq);
        let mut s = s0;
        for _ in 0..1000 {
            s = b.step(&s, u, Vector2::zeros(), 1e-3).unwrap();
        }
        assert!((s.q.0 - s0.q.0).amax() < 1e-12);
        assert!(s.p.amax() < 1e-12);
    }

    #[test]
    fn non_positive_step_rejected() {
        let b = biped();
        let s = State::at_rest(GenCoord::zero());
        assert!(matches!(
            b.step(&s, Vector2::zeros(), Vector2::zeros(), 0.0),
            Err(ModelError::InvalidStep(_))
        ));
    }

    #[test]
    fn blow_up_reports_time() {
        let b = biped();
        let s = State::at_rest(GenCoord::zero());
        let policy = |t: f64, _: &State| {
            let big = if t > 0.0015 { f64::INFINITY } else { 0.0 };
            (Vector2::new(big, 0.0), Vector2::zeros())
        };
        match b.simulate(&s, 1e-3, 10, 1, &policy) {
            Err(ModelError::IntegrationBlowUp { t }) => assert!((t - 0.002).abs() < 1e-12 || (t - 0.003).abs() < 1e-12),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    /// Hip torques that hold both hip angles fixed, turning the body into one rigid pendulum.
    fn frozen_hips(b: &Biped) -> impl Fn(f64, &State) -> (Vector2<f64>, Vector2<f64>) + '_ {
        move |_t, s: &State| {
            let m = b.mass_matrix(&s.q);
            let qdot = b.velocity(s).unwrap();
            let grad = b.grad_q_from_velocity(&s.q, &qdot);
            let dm = b.mass_matrix_derivatives(&s.q);
            let mut mdot = Matrix5::zeros();
            for k in 0..DOF {
                mdot += qdot[k] * dm[k];
            }
            // ṗ = M q̈ + Ṁ q̇; with only φ accelerating, the φ row fixes φ̈.
            let bias = mdot * qdot;
            let phi_dd = (-grad[PHI] - bias[PHI]) / m[(PHI, PHI)];
            let need = m.column(PHI) * phi_dd + bias + grad;
            (Vector2::new(need[THETA_L], need[THETA_R]), Vector2::zeros())
        }
    }

    #[test]
    fn frozen_hips_match_physical_pendulum_period() {
        let params = ModelParams::default();
        let b = Biped::new(params).unwrap();
        // Hanging below the pinned foot.
        let amp = 0.01;
        let q0 = GenCoord::new(0.0, 0.0, std::f64::consts::PI + amp, 0.0, 0.0);
        // Independent rigid-body oracle: pivot inertia and COM distance of the straight chain.
        let p = &params;
        let d_right = p.l_leg - p.c_leg;
        let d_trunk = p.l_leg + p.c_trunk;
        let d_left = p.l_leg - p.c_leg;
        let m = p.total_mass();
        let com = (p.m_leg * d_right + p.m_trunk * d_trunk + p.m_leg * d_left) / m;
        let i_pivot = p.i_leg + p.m_leg * d_right * d_right
            + p.i_trunk + p.m_trunk * d_trunk * d_trunk
            + p.i_leg + p.m_leg * d_left * d_left;
        let period = 2.0 * std::f64::consts::PI * (i_pivot / (m * p.g * com)).sqrt();

        let policy = frozen_hips(&b);
        let dt = 1e-3;
        let mut s = State::at_rest(q0);
        let mut crossings = Vec::new();
        let mut prev = s.q.phi() - std::f64::consts::PI;
        let mut t = 0.0;
        while crossings.len() < 5 && t < 20.0 {
            s = b.step_with(t, &s, dt, &policy).unwrap();
            t += dt;
            let cur = s.q.phi() - std::f64::consts::PI;
            if prev > 0.0 && cur <= 0.0 {
                crossings.push(t - dt * cur / (cur - prev));
            }
            prev = cur;
        }
        assert!(s.q.theta_l().abs() < 1e-9 && s.q.theta_r().abs() < 1e-9);
        let measured = (crossings[4] - crossings[0]) / 4.0;
        assert!((measured - period).abs() / period < 1e-3, "measured {measured}, oracle {period}");
    }
}

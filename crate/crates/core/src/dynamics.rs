//! Twelve-state quadrotor model, hover linearization, motor mixer and
//! actuator-level attack injection.
//!
//! Conventions: world frame is z-up, attitude is ZYX Euler (yaw ψ, pitch θ,
//! roll φ), linear velocities are expressed in the world frame and angular
//! velocities `(p, q, r)` in the body frame. Rotor dynamics are instantaneous.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, Vector};

pub const STATE_DIM: usize = 12;
pub const INPUT_DIM: usize = 4;

/// Margin kept from the pitch singularity of the Euler kinematics.
pub const EULER_GUARD: f64 = 0.01;

/// State vector indices.
pub mod idx {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const Z: usize = 2;
    pub const PHI: usize = 3;
    pub const THETA: usize = 4;
    pub const PSI: usize = 5;
    pub const VX: usize = 6;
    pub const VY: usize = 7;
    pub const VZ: usize = 8;
    pub const P: usize = 9;
    pub const Q: usize = 10;
    pub const R: usize = 11;
}

pub const STATE_NAMES: [&str; STATE_DIM] = [
    "x", "y", "z", "phi", "theta", "psi", "vx", "vy", "vz", "p", "q", "r",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("pitch {theta} rad is within {EULER_GUARD} rad of the Euler singularity")]
    EulerSingularity { theta: f64 },
    #[error("non-finite state")]
    NonFinite,
    #[error("invalid quadrotor parameters: {0}")]
    InvalidParams(String),
}

/// Position, ZYX Euler angles, world-frame velocity and body rates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State12(pub [f64; STATE_DIM]);

impl State12 {
    /// Hover equilibrium at the given position and yaw.
    pub fn hover(x: f64, y: f64, z: f64, psi: f64) -> Self {
        let mut s = [0.0; STATE_DIM];
        s[idx::X] = x;
        s[idx::Y] = y;
        s[idx::Z] = z;
        s[idx::PSI] = psi;
        Self(s)
    }

    pub fn from_vector(v: &Vector) -> Self {
        let mut s = [0.0; STATE_DIM];
        s.copy_from_slice(&v.as_slice()[..STATE_DIM]);
        Self(s)
    }

    pub fn to_vector(&self) -> Vector {
        Vector::from_row_slice(&self.0)
    }

    pub fn position(&self) -> [f64; 3] {
        [self.0[idx::X], self.0[idx::Y], self.0[idx::Z]]
    }

    pub fn yaw(&self) -> f64 {
        self.0[idx::PSI]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Zero velocities and zero roll/pitch.
    pub fn is_equilibrium(&self) -> bool {
        self.0[idx::PHI] == 0.0
            && self.0[idx::THETA] == 0.0
            && self.0[idx::VX..].iter().all(|v| *v == 0.0)
    }

    pub fn sub(&self, other: &State12) -> State12 {
        let mut d = [0.0; STATE_DIM];
        for (i, v) in d.iter_mut().enumerate() {
            *v = self.0[i] - other.0[i];
        }
        State12(d)
    }
}

/// Total body-z thrust and the three body torques.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub thrust: f64,
    pub tau_phi: f64,
    pub tau_theta: f64,
    pub tau_psi: f64,
}

impl Wrench {
    pub fn new(thrust: f64, tau_phi: f64, tau_theta: f64, tau_psi: f64) -> Self {
        Self {
            thrust,
            tau_phi,
            tau_theta,
            tau_psi,
        }
    }

    pub fn to_array(&self) -> [f64; INPUT_DIM] {
        [self.thrust, self.tau_phi, self.tau_theta, self.tau_psi]
    }

    pub fn from_array(a: [f64; INPUT_DIM]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_vector(&self) -> Vector {
        Vector::from_row_slice(&self.to_array())
    }
}

/// Physical parameters of a "+" geometry quadrotor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub ixx: f64,
    pub iyy: f64,
    pub izz: f64,
    pub arm_length: f64,
    pub max_motor_thrust: f64,
    pub max_motor_torque: f64,
    pub gravity: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 0.8,
            ixx: 0.005,
            iyy: 0.005,
            izz: 0.009,
            arm_length: 0.165,
            max_motor_thrust: 4.0,
            max_motor_torque: 0.05,
            gravity: 9.81,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let fields = [
            ("mass", self.mass),
            ("ixx", self.ixx),
            ("iyy", self.iyy),
            ("izz", self.izz),
            ("arm_length", self.arm_length),
            ("max_motor_thrust", self.max_motor_thrust),
            ("max_motor_torque", self.max_motor_torque),
            ("gravity", self.gravity),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::InvalidParams(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Thrust needed to hover, `m g`.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn hover_wrench(&self) -> Wrench {
        Wrench::new(self.hover_thrust(), 0.0, 0.0, 0.0)
    }

    /// Maps normalized motor commands to the wrench.
    ///
    /// Motors 0..4 sit on the body +x, +y, −x, −y arms; 0 and 2 spin so that
    /// their reaction torque is +z.
    pub fn mixer(&self) -> Matrix4<f64> {
        let f = self.max_motor_thrust;
        let l = self.arm_length * f;
        let k = self.max_motor_torque;
        Matrix4::new(
            f, f, f, f, //
            0.0, l, 0.0, -l, //
            -l, 0.0, l, 0.0, //
            k, -k, k, -k,
        )
    }
}

/// Nonlinear state derivative.
pub fn quad_derivative(
    s: &State12,
    w: &Wrench,
    p: &QuadrotorParams,
) -> Result<State12, DynamicsError> {
    let x = &s.0;
    if !s.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    let (phi, theta, psi) = (x[idx::PHI], x[idx::THETA], x[idx::PSI]);
    if theta.abs() > FRAC_PI_2 - EULER_GUARD {
        return Err(DynamicsError::EulerSingularity { theta });
    }
    let (sphi, cphi) = phi.sin_cos();
    let (sth, cth) = theta.sin_cos();
    let (spsi, cpsi) = psi.sin_cos();
    let (pr, qr, rr) = (x[idx::P], x[idx::Q], x[idx::R]);

    let mut d = [0.0; STATE_DIM];
    d[idx::X] = x[idx::VX];
    d[idx::Y] = x[idx::VY];
    d[idx::Z] = x[idx::VZ];

    d[idx::PHI] = pr + (qr * sphi + rr * cphi) * sth / cth;
    d[idx::THETA] = qr * cphi - rr * sphi;
    d[idx::PSI] = (qr * sphi + rr * cphi) / cth;

    let a = w.thrust / p.mass;
    d[idx::VX] = a * (cpsi * sth * cphi + spsi * sphi);
    d[idx::VY] = a * (spsi * sth * cphi - cpsi * sphi);
    d[idx::VZ] = a * cth * cphi - p.gravity;

    d[idx::P] = (w.tau_phi + (p.iyy - p.izz) * qr * rr) / p.ixx;
    d[idx::Q] = (w.tau_theta + (p.izz - p.ixx) * pr * rr) / p.iyy;
    d[idx::R] = (w.tau_psi + (p.ixx - p.iyy) * pr * qr) / p.izz;
    Ok(State12(d))
}

/// Analytic Jacobians `(A, B)` of [`quad_derivative`] at hover (zero yaw,
/// thrust `m g`), in deviation coordinates.
pub fn linearize_hover(p: &QuadrotorParams) -> (Matrix, Matrix) {
    let mut a = Matrix::zeros(STATE_DIM, STATE_DIM);
    let mut b = Matrix::zeros(STATE_DIM, INPUT_DIM);
    a[(idx::X, idx::VX)] = 1.0;
    a[(idx::Y, idx::VY)] = 1.0;
    a[(idx::Z, idx::VZ)] = 1.0;
    a[(idx::PHI, idx::P)] = 1.0;
    a[(idx::THETA, idx::Q)] = 1.0;
    a[(idx::PSI, idx::R)] = 1.0;
    a[(idx::VX, idx::THETA)] = p.gravity;
    a[(idx::VY, idx::PHI)] = -p.gravity;
    b[(idx::VZ, 0)] = 1.0 / p.mass;
    b[(idx::P, 1)] = 1.0 / p.ixx;
    b[(idx::Q, 2)] = 1.0 / p.iyy;
    b[(idx::R, 3)] = 1.0 / p.izz;
    (a, b)
}

/// Result of mapping a wrench to motor commands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorCommands {
    /// Normalized per-motor commands in `[0, 1]`.
    pub commands: [f64; 4],
    /// True when the unclipped commands left `[0, 1]`.
    pub saturated: bool,
}

/// Wrench → normalized motor commands, clipped to `[0, 1]`.
pub fn mixer_map(w: &Wrench, p: &QuadrotorParams) -> MotorCommands {
    let raw = mixer_inverse_raw(w, p);
    let mut saturated = false;
    let mut commands = [0.0; 4];
    for (c, r) in commands.iter_mut().zip(raw.iter()) {
        if *r < 0.0 || *r > 1.0 || !r.is_finite() {
            saturated = true;
        }
        *c = if r.is_finite() {
            r.clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    MotorCommands {
        commands,
        saturated,
    }
}

/// Unclipped solution of `mixer · c = w`.
pub fn mixer_inverse_raw(w: &Wrench, p: &QuadrotorParams) -> [f64; 4] {
    let m = p.mixer();
    let c = m
        .lu()
        .solve(&Vector4::from(w.to_array()))
        .unwrap_or_else(|| Vector4::repeat(f64::NAN));
    [c[0], c[1], c[2], c[3]]
}

/// Motor commands → wrench.
pub fn mixer_forward(c: &[f64; 4], p: &QuadrotorParams) -> Wrench {
    let w = p.mixer() * Vector4::from(*c);
    Wrench::new(w[0], w[1], w[2], w[3])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Motors shut off.
    PropellerOff,
}

/// Where the attack enters the actuation chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackPath {
    /// The compromised tracking controller emits the attack wrench, which
    /// still passes through the hypervisor clamp.
    ThroughController,
    /// Motor commands are overridden after the mixer.
    BypassClamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub path: AttackPath,
    pub start: f64,
    pub end: f64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, path: AttackPath, start: f64, end: f64) -> Result<Self, String> {
        let a = Self {
            kind,
            path,
            start,
            end,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.start.is_finite() && self.end.is_finite() && self.start < self.end) {
            return Err(format!(
                "attack window [{}, {}) is not well formed",
                self.start, self.end
            ));
        }
        Ok(())
    }

    pub fn active(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }

    /// Wrench emitted by a compromised controller at time `t`.
    pub fn corrupt_wrench(&self, w: Wrench, t: f64) -> Wrench {
        if self.path != AttackPath::ThroughController || !self.active(t) {
            return w;
        }
        match self.kind {
            AttackKind::PropellerOff => Wrench::default(),
        }
    }
}

/// Motor-level override for attacks that bypass the clamp.
pub fn apply_attack(a: Option<&AttackSpec>, cmds: [f64; 4], t: f64) -> [f64; 4] {
    match a {
        Some(a) if a.path == AttackPath::BypassClamp && a.active(t) => match a.kind {
            AttackKind::PropellerOff => [0.0; 4],
        },
        _ => cmds,
    }
}

//! LQR synthesis, the regulator law with gravity feedforward, and the
//! hypervisor's per-mode wrench clamp.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{State12, Wrench, INPUT_DIM};
use crate::numerics::{self, Matrix, NumericsError, Vector};
use crate::rejuvenation::Mode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid clamp bounds: {0}")]
    InvalidClamp(String),
}

/// State-feedback gain and the feedforward it is applied around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    /// `K = R⁻¹BᵀS`, inputs × states.
    pub gain: Matrix,
    /// Stabilising CARE solution.
    pub riccati: Matrix,
    pub feedforward: Wrench,
}

impl ControllerGains {
    /// `A − BK`.
    pub fn closed_loop(&self, a: &Matrix, b: &Matrix) -> Matrix {
        a - b * &self.gain
    }
}

pub fn lqr_gain(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    feedforward: Wrench,
) -> Result<ControllerGains, ControlError> {
    let s = numerics::solve_care(a, b, q, r)?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| NumericsError::Dimension("R is singular".into()))?;
    Ok(ControllerGains {
        gain: r_inv * b.transpose() * &s,
        riccati: s,
        feedforward,
    })
}

/// `u = u_ff − K (x − x_eq)`.
pub fn control_law(g: &ControllerGains, x: &State12, x_eq: &State12) -> Wrench {
    let err = Vector::from_row_slice(&x.sub(x_eq).0);
    let du = &g.gain * err;
    let ff = g.feedforward.to_array();
    let mut u = [0.0; INPUT_DIM];
    for i in 0..INPUT_DIM {
        u[i] = ff[i] - du[i];
    }
    Wrench::from_array(u)
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn symmetric(r: f64) -> Self {
        Self { lo: -r, hi: r }
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn strictly_inside(&self, outer: &Interval) -> bool {
        outer.lo <= self.lo && self.hi <= outer.hi && (outer.lo < self.lo || self.hi < outer.hi)
    }
}

/// Admissible wrench box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrenchBounds {
    pub thrust: Interval,
    pub tau_phi: Interval,
    pub tau_theta: Interval,
    pub tau_psi: Interval,
}

impl WrenchBounds {
    pub fn intervals(&self) -> [Interval; INPUT_DIM] {
        [self.thrust, self.tau_phi, self.tau_theta, self.tau_psi]
    }

    pub fn clip(&self, w: &Wrench) -> Wrench {
        let iv = self.intervals();
        let a = w.to_array();
        Wrench::from_array([
            iv[0].clip(a[0]),
            iv[1].clip(a[1]),
            iv[2].clip(a[2]),
            iv[3].clip(a[3]),
        ])
    }

    pub fn contains(&self, w: &Wrench) -> bool {
        self.intervals()
            .iter()
            .zip(w.to_array())
            .all(|(iv, v)| iv.contains(v))
    }
}

/// Per-mode clamp applied by the hypervisor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClampSpec {
    pub tracking: WrenchBounds,
    pub safety: WrenchBounds,
}

impl Default for ClampSpec {
    fn default() -> Self {
        Self {
            tracking: WrenchBounds {
                thrust: Interval::new(2.0, 14.0),
                tau_phi: Interval::symmetric(0.0033),
                tau_theta: Interval::symmetric(0.0033),
                tau_psi: Interval::symmetric(0.0005),
            },
            safety: WrenchBounds {
                thrust: Interval::new(0.0, 16.0),
                tau_phi: Interval::symmetric(0.66),
                tau_theta: Interval::symmetric(0.66),
                tau_psi: Interval::symmetric(0.1),
            },
        }
    }
}

impl ClampSpec {
    pub fn validate(&self) -> Result<(), ControlError> {
        for (name, b) in [("tracking", &self.tracking), ("safety", &self.safety)] {
            for iv in b.intervals() {
                if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo < iv.hi) {
                    return Err(ControlError::InvalidClamp(format!(
                        "{name}: interval [{}, {}]",
                        iv.lo, iv.hi
                    )));
                }
            }
        }
        let nested = self
            .tracking
            .intervals()
            .iter()
            .zip(self.safety.intervals().iter())
            .all(|(t, s)| t.strictly_inside(s));
        if !nested {
            return Err(ControlError::InvalidClamp(
                "tracking bounds must lie strictly inside safety bounds".into(),
            ));
        }
        Ok(())
    }

    /// Bounds in force for `mode`. During refresh the held tracking command
    /// is still subject to the tracking clamp.
    pub fn bounds(&self, mode: Mode) -> &WrenchBounds {
        match mode {
            Mode::SafetyControl => &self.safety,
            Mode::TrackingControl | Mode::SoftwareRefresh => &self.tracking,
        }
    }
}

/// Componentwise clip of `w` to the bounds of `mode`.
pub fn clamp_controls(spec: &ClampSpec, mode: Mode, w: &Wrench) -> Wrench {
    spec.bounds(mode).clip(w)
}

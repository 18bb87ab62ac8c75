//! End-to-end controller and safe-set design for the quadrotor: LQR gain,
//! constraint polytope, invariant ellipsoid, and reach-based certification.
//!
//! Everything here lives in deviation coordinates around a hover point, so
//! one design serves every equilibrium reference.

use std::f64::consts::FRAC_PI_4;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{lqr_gain, ClampSpec, ControlError, ControllerGains};
use crate::dynamics::{linearize_hover, DynamicsError, QuadrotorParams, INPUT_DIM, STATE_DIM};
use crate::numerics::{spectral_abscissa, Matrix, Vector};
use crate::reach::{self, InputSet, ReachError, TucReport};
use crate::sets::{
    invariant_ellipsoid, normalize_half_widths, shrink_polytope, Ellipsoid, EllipsoidMethod,
    HalfspacePolytope, SetError,
};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error("invalid design parameter: {0}")]
    Invalid(String),
}

/// LQR weights as diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrWeights {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self {
            q: vec![50.0; STATE_DIM],
            r: vec![100.0; INPUT_DIM],
        }
    }
}

impl LqrWeights {
    fn matrices(&self) -> Result<(Matrix, Matrix), DesignError> {
        if self.q.len() != STATE_DIM || self.r.len() != INPUT_DIM {
            return Err(DesignError::Invalid(format!(
                "Q needs {STATE_DIM} and R needs {INPUT_DIM} diagonal entries (got {} and {})",
                self.q.len(),
                self.r.len()
            )));
        }
        if self.q.iter().any(|v| !(*v >= 0.0)) || self.r.iter().any(|v| !(*v > 0.0)) {
            return Err(DesignError::Invalid("Q must be ⪰ 0 and R ≻ 0".into()));
        }
        Ok((
            Matrix::from_diagonal(&Vector::from_row_slice(&self.q)),
            Matrix::from_diagonal(&Vector::from_row_slice(&self.r)),
        ))
    }
}

/// Design inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    pub safety_weights: LqrWeights,
    /// Separate tracking weights; the safety design is reused when absent.
    pub tracking_weights: Option<LqrWeights>,
    /// Half-widths of the operating constraint box, state order.
    pub constraint_half_widths: Vec<f64>,
    pub eps_sc: f64,
    pub eps_tc: f64,
    pub t_uc: f64,
    pub n_grid: usize,
    pub ellipsoid: EllipsoidMethod,
    /// Horizon and step of the worst-case settle-time scan.
    pub settle_horizon: f64,
    pub settle_dt: f64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            safety_weights: LqrWeights::default(),
            tracking_weights: None,
            constraint_half_widths: default_constraint_half_widths().to_vec(),
            eps_sc: 0.05,
            eps_tc: 0.01,
            t_uc: 0.18,
            n_grid: 64,
            ellipsoid: EllipsoidMethod::MaxDet,
            settle_horizon: 30.0,
            settle_dt: 0.01,
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<(), DesignError> {
        if self.constraint_half_widths.len() != STATE_DIM {
            return Err(DesignError::Invalid(format!(
                "constraint box needs {STATE_DIM} half-widths"
            )));
        }
        if !(0.0 < self.eps_tc && self.eps_tc < self.eps_sc && self.eps_sc < 1.0) {
            return Err(DesignError::Invalid(format!(
                "need 0 < eps_tc < eps_sc < 1 (got {}, {})",
                self.eps_tc, self.eps_sc
            )));
        }
        if !(self.t_uc > 0.0) || self.n_grid == 0 {
            return Err(DesignError::Invalid(
                "t_uc and n_grid must be positive".into(),
            ));
        }
        if !(self.settle_horizon > 0.0 && self.settle_dt > 0.0) {
            return Err(DesignError::Invalid("settle scan must be positive".into()));
        }
        Ok(())
    }
}

/// Position ±1, ±1, ±2.5 m; angles ±π/4; velocities ±2, ±2, ±5 m/s; body
/// rates ±5 rad/s.
pub fn default_constraint_half_widths() -> [f64; STATE_DIM] {
    [
        1.0, 1.0, 2.5, FRAC_PI_4, FRAC_PI_4, FRAC_PI_4, 2.0, 2.0, 5.0, 5.0, 5.0, 5.0,
    ]
}

/// A complete design in deviation coordinates.
#[derive(Debug, Clone)]
pub struct Design {
    pub a: Matrix,
    pub b: Matrix,
    pub safety: ControllerGains,
    pub tracking: ControllerGains,
    /// `A − B K_safety`.
    pub a_sc: Matrix,
    pub constraint: HalfspacePolytope,
    pub c_sc: HalfspacePolytope,
    /// Level-1 invariant ellipsoid around the origin.
    pub e_c: Ellipsoid,
    pub eps_sc: f64,
    pub eps_tc: f64,
    pub input_set: InputSet,
}

impl Design {
    pub fn shape(&self) -> &Matrix {
        &self.e_c.shape
    }

    pub fn e_sc(&self) -> Ellipsoid {
        self.e_c.with_level(self.eps_sc).expect("validated level")
    }

    pub fn e_tc(&self) -> Ellipsoid {
        self.e_c.with_level(self.eps_tc).expect("validated level")
    }

    pub fn closed_loop_abscissa(&self) -> f64 {
        spectral_abscissa(&self.a_sc)
    }

    /// Reach-based certification of `t_uc` plus the linear worst-case settle
    /// time into `E_SC`.
    pub fn certify(
        &self,
        t_uc: f64,
        n_grid: usize,
        cfg: &DesignConfig,
    ) -> Result<TucReport, DesignError> {
        let mut report = reach::verify_tuc(
            &self.a,
            &self.b,
            &self.input_set,
            &self.c_sc,
            &self.e_c,
            t_uc,
            n_grid,
        )?;
        report.settle_time = reach::worst_case_settle_time(
            &self.a_sc,
            &self.e_c.shape,
            self.eps_sc,
            cfg.settle_horizon,
            cfg.settle_dt,
        )?;
        Ok(report)
    }

    pub fn find_max_tuc(
        &self,
        t_lo: f64,
        t_hi: f64,
        tol: f64,
        n_grid: usize,
    ) -> Result<f64, DesignError> {
        Ok(reach::find_max_tuc(
            &self.a,
            &self.b,
            &self.input_set,
            &self.c_sc,
            &self.e_c,
            t_lo,
            t_hi,
            tol,
            n_grid,
        )?)
    }
}

pub fn design(
    params: &QuadrotorParams,
    clamp: &ClampSpec,
    cfg: &DesignConfig,
) -> Result<Design, DesignError> {
    params.validate()?;
    clamp.validate()?;
    cfg.validate()?;
    let (a, b) = linearize_hover(params);
    let (q, r) = cfg.safety_weights.matrices()?;
    let safety = lqr_gain(&a, &b, &q, &r, params.hover_wrench())?;
    let tracking = match &cfg.tracking_weights {
        Some(w) => {
            let (q, r) = w.matrices()?;
            lqr_gain(&a, &b, &q, &r, params.hover_wrench())?
        }
        None => safety.clone(),
    };
    let a_sc = safety.closed_loop(&a, &b);
    let origin = Vector::zeros(STATE_DIM);
    let constraint = normalize_half_widths(&cfg.constraint_half_widths, &origin)?;
    let c_sc = shrink_polytope(&constraint, cfg.eps_sc)?;
    let e_c = invariant_ellipsoid(&a_sc, &constraint, &cfg.ellipsoid)?;
    let input_set = InputSet::from_clamp(&clamp.tracking, params.hover_thrust())?;
    Ok(Design {
        a,
        b,
        safety,
        tracking,
        a_sc,
        constraint,
        c_sc,
        e_c,
        eps_sc: cfg.eps_sc,
        eps_tc: cfg.eps_tc,
        input_set,
    })
}

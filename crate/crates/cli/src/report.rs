//! JSON artifacts written by the CLI.

use serde::{Deserialize, Serialize};

use rejuv_core::design::Design;
use rejuv_core::dynamics::State12;
use rejuv_core::numerics::Matrix;
use rejuv_core::reach::TucReport;
use rejuv_core::sim::{Outcome, Phase, Trace};

use crate::config::RunConfig;

pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(r: &[Vec<f64>]) -> Matrix {
    let ncols = r.first().map_or(0, Vec::len);
    Matrix::from_fn(r.len(), ncols, |i, j| r[i][j])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bisection {
    pub max_tuc: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifySection {
    pub report: TucReport,
    pub bisection: Option<Bisection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignReport {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub k_safety: Vec<Vec<f64>>,
    pub k_tracking: Vec<Vec<f64>>,
    pub riccati_safety: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub log_det_p: f64,
    pub closed_loop_abscissa: f64,
    pub eps_sc: f64,
    pub eps_tc: f64,
    pub constraint_half_widths: Vec<f64>,
    pub verify: Option<VerifySection>,
}

impl DesignReport {
    pub fn new(cfg: &RunConfig, d: &Design, verify: Option<VerifySection>) -> Self {
        Self {
            a: rows(&d.a),
            b: rows(&d.b),
            k_safety: rows(&d.safety.gain),
            k_tracking: rows(&d.tracking.gain),
            riccati_safety: rows(&d.safety.riccati),
            p: rows(d.shape()),
            log_det_p: d.shape().determinant().ln(),
            closed_loop_abscissa: d.closed_loop_abscissa(),
            eps_sc: d.eps_sc,
            eps_tc: d.eps_tc,
            constraint_half_widths: cfg.design.constraint_half_widths.clone(),
            verify,
        }
    }

    /// Same gains, shape and levels as `d`, up to JSON round-off.
    pub fn matches(&self, d: &Design) -> bool {
        let close = |a: &Matrix, b: &[Vec<f64>]| {
            let b = from_rows(b);
            a.shape() == b.shape() && (a - b).norm() <= 1e-9 * a.norm().max(1.0)
        };
        close(d.shape(), &self.p)
            && close(&d.safety.gain, &self.k_safety)
            && close(&d.tracking.gain, &self.k_tracking)
            && self.eps_sc == d.eps_sc
            && self.eps_tc == d.eps_tc
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSummary {
    pub seed: u64,
    pub certified: bool,
    pub outcome: Outcome,
    pub references: Vec<State12>,
    pub phases: Vec<Phase>,
}

impl SimSummary {
    pub fn new(trace: &Trace, certified: bool, seed: u64) -> Self {
        Self {
            seed,
            certified,
            outcome: trace.outcome.clone(),
            references: trace.references.clone(),
            phases: trace.phases(),
        }
    }
}

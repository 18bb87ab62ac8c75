//! Supporting-hyperplane over-approximation of the reachable set under
//! uncertain (possibly adversarial) control, and certification of the
//! uncertain-control period `T_UC`.
//!
//! During uncertain control the plant runs open loop, `ẋ = A x + B u` with
//! `u` anywhere in the input box. For a facet normal `ξ` of the initial
//! polytope the propagated normal is `ξ(t) = e^{−Aᵀt} ξ`, and
//!
//! ```text
//! ξ(t)ᵀ x(t) ≤ max_{x₀ ∈ C_SC} ξᵀ x₀ + ∫₀ᵗ max_i ⟨ξ(τ), B u_i⟩ dτ
//! ```
//!
//! holds for every trajectory. Intersecting these halfspaces over all facets
//! gives the over-approximation. Box-derived initial sets keep their
//! antipodal pair structure under propagation, so the result is an affine
//! image of a box whose `2ⁿ` vertices are enumerated directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::WrenchBounds;
use crate::numerics::{self, box_vertices, mat_exp, AxisBox, Matrix, NumericsError, Vector};
use crate::sets::{lyapunov_value, Ellipsoid, HalfspacePolytope, NormalPair, SetError};

/// Slack allowed on `V ≤ 1` at reach-set vertices.
pub const CONTAINMENT_TOL: f64 = 1e-9;

/// Relative change under grid halving at which quadrature is accepted.
pub const QUAD_REL_TOL: f64 = 1e-6;

const MAX_REFINEMENTS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReachError {
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid bracket: {0}")]
    Bracket(String),
}

/// Input deviation box (thrust deviation from hover, three torques).
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    bounds: AxisBox,
    vertices: Vec<Vector>,
}

impl InputSet {
    pub fn new(bounds: AxisBox) -> Result<Self, ReachError> {
        let vertices = box_vertices(&bounds)?;
        Ok(Self { bounds, vertices })
    }

    /// Clamp box shifted by the hover feedforward.
    pub fn from_clamp(bounds: &WrenchBounds, hover_thrust: f64) -> Result<Self, ReachError> {
        let iv = bounds.intervals();
        let ff = [hover_thrust, 0.0, 0.0, 0.0];
        let lower = iv.iter().zip(ff).map(|(i, f)| i.lo - f).collect();
        let upper = iv.iter().zip(ff).map(|(i, f)| i.hi - f).collect();
        Self::new(AxisBox::new(lower, upper)?)
    }

    /// Degenerate `{0}`-like set: a box of the given tiny half-width.
    pub fn zero(dim: usize) -> Self {
        let bounds = AxisBox::centered(&vec![0.0; dim], &vec![f64::MIN_POSITIVE; dim])
            .expect("positive widths");
        Self::new(bounds).expect("small dimension")
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn bounds(&self) -> &AxisBox {
        &self.bounds
    }

    pub fn vertices(&self) -> &[Vector] {
        &self.vertices
    }

    pub fn contains_zero(&self) -> bool {
        self.bounds.contains(&vec![0.0; self.dim()])
    }

    /// `max_i cᵀ u_i` over the vertices.
    pub fn support(&self, c: &Vector) -> f64 {
        self.vertices
            .iter()
            .map(|u| c.dot(u))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `e^{−Aᵀt} ξ`.
pub fn support_direction(a: &Matrix, xi: &Vector, t: f64) -> Result<Vector, ReachError> {
    if t < 0.0 {
        return Err(ReachError::Invalid(format!("negative time {t}")));
    }
    Ok(mat_exp(&(-a.transpose()), t)? * xi)
}

/// Samples `τ ↦ max_i ⟨e^{−Aᵀτ}ξ, B u_i⟩` at `τ_k = k h`, `k = 0..=steps`.
fn integrand_samples(
    step_map: &Matrix,
    bt: &Matrix,
    u: &InputSet,
    xi: &Vector,
    steps: usize,
) -> Vec<f64> {
    let mut dir = xi.clone();
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        if k > 0 {
            dir = step_map * &dir;
        }
        out.push(u.support(&(bt * &dir)));
    }
    out
}

fn trapezoid(samples: &[f64], h: f64) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    h * (samples[1..n - 1].iter().sum::<f64>() + 0.5 * (samples[0] + samples[n - 1]))
}

/// `∫₀ᵗ max_i ⟨ξ(τ), B u_i⟩ dτ` by composite trapezoid, refined by grid
/// halving until the relative change is below [`QUAD_REL_TOL`].
pub fn support_integral(
    a: &Matrix,
    b: &Matrix,
    u: &InputSet,
    xi: &Vector,
    t: f64,
    dt_quad: f64,
) -> Result<f64, ReachError> {
    if !(dt_quad > 0.0) {
        return Err(ReachError::Invalid(format!("quadrature step {dt_quad}")));
    }
    if t < 0.0 {
        return Err(ReachError::Invalid(format!("negative time {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let bt = b.transpose();
    let mut steps = ((t / dt_quad).ceil() as usize).max(1);
    let mut prev: Option<f64> = None;
    for _ in 0..MAX_REFINEMENTS {
        let h = t / steps as f64;
        let map = mat_exp(&(-a.transpose()), h)?;
        let val = trapezoid(&integrand_samples(&map, &bt, u, xi, steps), h);
        if let Some(p) = prev {
            if (val - p).abs() <= QUAD_REL_TOL * val.abs() + 1e-15 {
                return Ok(val);
            }
        }
        prev = Some(val);
        steps *= 2;
    }
    Ok(prev.expect("at least one pass"))
}

/// Over-approximation of the reachable set at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachOverApprox {
    pub time: f64,
    pub center: Vector,
    pub normals: Vec<Vector>,
    pub offsets: Vec<f64>,
    pub vertices: Vec<Vector>,
}

impl ReachOverApprox {
    pub fn polytope(&self) -> HalfspacePolytope {
        HalfspacePolytope {
            center: self.center.clone(),
            normals: self.normals.clone(),
            offsets: self.offsets.clone(),
        }
    }

    /// Whether `x` satisfies every facet inequality (absolute slack `tol`).
    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        self.polytope().contains(x, tol)
    }
}

/// `max_{v ∈ vertices(C)} ξ_jᵀ(v − c)` for every facet.
fn initial_support(c: &HalfspacePolytope) -> Result<Vec<f64>, ReachError> {
    let verts = c.vertices()?;
    Ok(c.normals
        .iter()
        .map(|n| {
            verts
                .iter()
                .map(|v| n.dot(&(v - &c.center)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Over-approximation of the states reachable at time `t` from `c_sc` under
/// open-loop dynamics and inputs in `u`.
pub fn reach_overapprox(
    a: &Matrix,
    b: &Matrix,
    u: &InputSet,
    c_sc: &HalfspacePolytope,
    t: f64,
) -> Result<ReachOverApprox, ReachError> {
    if t < 0.0 {
        return Err(ReachError::Invalid(format!("negative time {t}")));
    }
    let pairs = c_sc.antipodal_pairs()?;
    let init = initial_support(c_sc)?;
    let back = mat_exp(&(-a.transpose()), t)?;
    let dt_quad = (t / 256.0).max(1e-9);
    let mut normals = Vec::with_capacity(c_sc.len());
    let mut offsets = Vec::with_capacity(c_sc.len());
    for (xi, h) in c_sc.normals.iter().zip(&init) {
        normals.push(&back * xi);
        offsets.push(h + support_integral(a, b, u, xi, t, dt_quad)?);
    }
    let vertices = affine_box_vertices(&c_sc.center, &normals, &offsets, &pairs)?;
    Ok(ReachOverApprox {
        time: t,
        center: c_sc.center.clone(),
        normals,
        offsets,
        vertices,
    })
}

/// Pair-structured halfspaces `lower_k ≤ ξ_kᵀ(x − c) ≤ upper_k` as
/// `(M, lower, upper)`.
fn pair_box(
    normals: &[Vector],
    offsets: &[f64],
    pairs: &[NormalPair],
) -> Result<(Matrix, AxisBox), ReachError> {
    let n = normals[0].len();
    let mut m = Matrix::zeros(pairs.len(), n);
    for (row, p) in pairs.iter().enumerate() {
        m.set_row(row, &normals[p.pos].transpose());
    }
    let lower = pairs.iter().map(|p| -offsets[p.neg] / p.ratio).collect();
    let upper = pairs.iter().map(|p| offsets[p.pos]).collect();
    Ok((m, AxisBox::new(lower, upper)?))
}

fn affine_box_vertices(
    center: &Vector,
    normals: &[Vector],
    offsets: &[f64],
    pairs: &[NormalPair],
) -> Result<Vec<Vector>, ReachError> {
    let (m, bx) = pair_box(normals, offsets, pairs)?;
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| ReachError::Invalid("propagated normals are singular".into()))?;
    Ok(box_vertices(&bx)?
        .into_iter()
        .map(|y| center + &m_inv * y)
        .collect())
}

/// Outcome of a `T_UC` certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TucReport {
    pub t_uc: f64,
    pub eps_sc: f64,
    pub grid_times: Vec<f64>,
    /// Largest `V` over the vertices at each grid time.
    pub worst_values: Vec<f64>,
    pub pass: bool,
    /// `1 − max V` over all grid times.
    pub margin: f64,
    /// Largest `|ΔV / Δt|` between consecutive grid times.
    pub worst_slope: f64,
    /// Worst-case time for the linear safety loop to go from the boundary of
    /// `E_C` into `E_SC`, when measured.
    pub settle_time: Option<f64>,
}

/// Cumulative support integrals for every facet on a common time grid.
struct FacetIntegrals {
    /// `values[k][j]` is the integral for facet `j` up to grid time `k + 1`.
    values: Vec<Vec<f64>>,
}

fn facet_integrals(
    a: &Matrix,
    b: &Matrix,
    u: &InputSet,
    normals: &[Vector],
    grid_times: &[f64],
) -> Result<FacetIntegrals, ReachError> {
    // Grid times are uniform: t_k = k · spacing.
    let spacing = grid_times[0];
    let bt = b.transpose();
    let mut per_grid = 8usize;
    let mut prev: Option<Vec<Vec<f64>>> = None;
    for _ in 0..MAX_REFINEMENTS {
        let h = spacing / per_grid as f64;
        let map = mat_exp(&(-a.transpose()), h)?;
        let total = per_grid * grid_times.len();
        let mut values = vec![vec![0.0; normals.len()]; grid_times.len()];
        for (j, xi) in normals.iter().enumerate() {
            let s = integrand_samples(&map, &bt, u, xi, total);
            let mut acc = 0.0;
            for k in 0..grid_times.len() {
                let seg = &s[k * per_grid..=(k + 1) * per_grid];
                acc += trapezoid(seg, h);
                values[k][j] = acc;
            }
        }
        if let Some(p) = &prev {
            let converged = values
                .iter()
                .flatten()
                .zip(p.iter().flatten())
                .all(|(v, w)| (v - w).abs() <= QUAD_REL_TOL * v.abs() + 1e-15);
            if converged {
                return Ok(FacetIntegrals { values });
            }
        }
        prev = Some(values);
        per_grid *= 2;
    }
    Ok(FacetIntegrals {
        values: prev.expect("at least one pass"),
    })
}

/// Uniform grid of `n_grid` times in `(0, t_uc]`.
pub fn certification_grid(t_uc: f64, n_grid: usize) -> Vec<f64> {
    (1..=n_grid)
        .map(|k| t_uc * k as f64 / n_grid as f64)
        .collect()
}

/// Checks `R⁺(C_SC, t, U) ⊆ E_C` at every grid time in `(0, T_UC]` by
/// evaluating the Lyapunov function of `E_C` at all vertices.
pub fn verify_tuc(
    a: &Matrix,
    b: &Matrix,
    u: &InputSet,
    c_sc: &HalfspacePolytope,
    e_c: &Ellipsoid,
    t_uc: f64,
    n_grid: usize,
) -> Result<TucReport, ReachError> {
    let grid = certification_grid(t_uc, n_grid.max(1));
    verify_on_grid(a, b, u, c_sc, e_c, t_uc, &grid)
}

/// Same as [`verify_tuc`] on an explicit uniform grid `t_k = k · grid[0]`.
pub fn verify_on_grid(
    a: &Matrix,
    b: &Matrix,
    u: &InputSet,
    c_sc: &HalfspacePolytope,
    e_c: &Ellipsoid,
    t_uc: f64,
    grid: &[f64],
) -> Result<TucReport, ReachError> {
    if !(t_uc > 0.0 && t_uc.is_finite()) {
        return Err(ReachError::Invalid(format!("T_UC = {t_uc}")));
    }
    if grid.is_empty() {
        return Err(ReachError::Invalid("empty grid".into()));
    }
    if e_c.dim() != c_sc.dim() {
        return Err(ReachError::Invalid(
            "ellipsoid and polytope dimensions differ".into(),
        ));
    }
    let pairs = c_sc.antipodal_pairs()?;
    let init = initial_support(c_sc)?;
    let integrals = facet_integrals(a, b, u, &c_sc.normals, grid)?;
    let xi = c_sc.pair_matrix(&pairs);
    let offset_dev = &c_sc.center - &e_c.center;
    let mut worst_values = Vec::with_capacity(grid.len());
    for (k, &t) in grid.iter().enumerate() {
        // Rows of M(t) are ξ_kᵀ e^{−At}.
        let m = &xi * mat_exp(&(-a), t)?;
        let offsets: Vec<f64> = init
            .iter()
            .zip(&integrals.values[k])
            .map(|(h, s)| h + s)
            .collect();
        let (_, bx) = pair_box(&c_sc.normals, &offsets, &pairs)?;
        let m_inv = m
            .try_inverse()
            .ok_or_else(|| ReachError::Invalid("propagated normals are singular".into()))?;
        worst_values.push(max_quadratic_on_box(&m_inv, &offset_dev, &e_c.shape, &bx)?);
    }
    let worst = worst_values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_slope = worst_values
        .windows(2)
        .zip(grid.windows(2))
        .map(|(v, t)| ((v[1] - v[0]) / (t[1] - t[0])).abs())
        .fold(0.0, f64::max);
    Ok(TucReport {
        t_uc,
        eps_sc: c_sc.offsets.iter().copied().fold(0.0, f64::max).powi(2),
        grid_times: grid.to_vec(),
        pass: worst_values
            .iter()
            .all(|v| *v <= e_c.level + CONTAINMENT_TOL),
        margin: e_c.level - worst,
        worst_values,
        worst_slope,
        settle_time: None,
    })
}

/// `max (d + M⁻¹y)ᵀ P (d + M⁻¹y)` over the corners `y` of `bx`.
fn max_quadratic_on_box(
    m_inv: &Matrix,
    d: &Vector,
    p: &Matrix,
    bx: &AxisBox,
) -> Result<f64, ReachError> {
    let w = m_inv.transpose() * p * m_inv;
    let lin = m_inv.transpose() * (p * d) * 2.0;
    let c0 = d.dot(&(p * d));
    Ok(box_vertices(bx)?
        .iter()
        .map(|y| y.dot(&(&w * y)) + lin.dot(y) + c0)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Largest `T` on the lattice `t_lo + k·tol` that certifies, bracketed by a
/// certified `t_lo` and an uncertified `t_hi`.
pub fn find_max_tuc(
    a: &Matrix,
    b: &Matrix,
    u: &InputSet,
    c_sc: &HalfspacePolytope,
    e_c: &Ellipsoid,
    t_lo: f64,
    t_hi: f64,
    tol: f64,
    n_grid: usize,
) -> Result<f64, ReachError> {
    if !(tol > 0.0 && t_lo > 0.0 && t_hi > t_lo) {
        return Err(ReachError::Bracket(format!(
            "need 0 < t_lo < t_hi and tol > 0 (got {t_lo}, {t_hi}, {tol})"
        )));
    }
    let check = |t: f64| verify_tuc(a, b, u, c_sc, e_c, t, n_grid).map(|r| r.pass);
    if !check(t_lo)? {
        return Err(ReachError::Bracket(format!(
            "T_UC = {t_lo} does not certify"
        )));
    }
    let at = |k: u64| t_lo + k as f64 * tol;
    let mut lo = 0u64;
    let mut hi = ((t_hi - t_lo) / tol).ceil() as u64;
    if check(at(hi))? {
        return Err(ReachError::Bracket(format!(
            "T_UC = {} still certifies; no failing end",
            at(hi)
        )));
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if check(at(mid))? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(lo))
}

/// `sup_{V(x₀)=1} V(e^{A_SC t} x₀)`: the worst-case Lyapunov value after `t`
/// seconds of linear safety control from the boundary of `E_C`.
pub fn worst_case_gain(a_sc: &Matrix, p: &Matrix, t: f64) -> Result<f64, ReachError> {
    let l = p
        .clone()
        .cholesky()
        .ok_or_else(|| ReachError::Invalid("P is not positive definite".into()))?
        .l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| ReachError::Invalid("singular Cholesky factor".into()))?;
    let phi = mat_exp(a_sc, t)?;
    let m = l.transpose() * phi * l_inv.transpose();
    Ok((m.transpose() * &m).symmetric_eigenvalues().max())
}

/// First time on a `dt` grid at which the worst-case gain drops below
/// `eps_sc`, or `None` within `horizon`.
pub fn worst_case_settle_time(
    a_sc: &Matrix,
    p: &Matrix,
    eps_sc: f64,
    horizon: f64,
    dt: f64,
) -> Result<Option<f64>, ReachError> {
    let steps = (horizon / dt).ceil() as usize;
    for k in 0..=steps {
        let t = k as f64 * dt;
        if worst_case_gain(a_sc, p, t)? <= eps_sc {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Entry of one linear safety-control run into `E_SC`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleRun {
    /// First sample time with `V ≤ ε_SC`.
    pub entry_time: Option<f64>,
    /// `V` rose above `ε_SC` after entry.
    pub reentered: bool,
    /// Largest per-step increase of `V`.
    pub max_increase: f64,
    /// Largest `V` along the run.
    pub max_value: f64,
}

/// Exact sampled propagation of `ẋ = A_SC (x − c)` from `x0`.
pub fn settle_run(
    a_sc: &Matrix,
    e: &Ellipsoid,
    eps_sc: f64,
    x0: &Vector,
    horizon: f64,
    dt: f64,
) -> Result<SettleRun, ReachError> {
    let phi = mat_exp(a_sc, dt)?;
    let mut dev = x0 - &e.center;
    let mut v = lyapunov_value(e, x0);
    let mut run = SettleRun {
        entry_time: (v <= eps_sc).then_some(0.0),
        reentered: false,
        max_increase: f64::NEG_INFINITY,
        max_value: v,
    };
    let steps = (horizon / dt).ceil() as usize;
    for k in 1..=steps {
        dev = &phi * dev;
        let next = dev.dot(&(&e.shape * &dev));
        run.max_increase = run.max_increase.max(next - v);
        run.max_value = run.max_value.max(next);
        v = next;
        if v <= eps_sc {
            if run.entry_time.is_none() {
                run.entry_time = Some(k as f64 * dt);
            }
        } else if run.entry_time.is_some() {
            run.reentered = true;
        }
    }
    Ok(run)
}

/// Spectral abscissa, re-exported for reporting.
pub fn spectral_abscissa(a: &Matrix) -> f64 {
    numerics::spectral_abscissa(a)
}

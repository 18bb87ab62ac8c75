//! Constraint polytopes, invariant ellipsoids and Lyapunov level sets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, box_vertices, AxisBox, Matrix, NumericsError, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("axis {axis}: range does not strictly contain the center ({detail})")]
    InvalidRange { axis: usize, detail: String },
    #[error("level {0} is outside (0, 1]")]
    LevelOutOfRange(f64),
    #[error("polytope is not normalized (offsets must all be 1)")]
    NotNormalized,
    #[error("closed-loop matrix is not Hurwitz (spectral abscissa {0:.3e})")]
    NotHurwitz(f64),
    #[error("constraint set is infeasible or unbounded: {0}")]
    Infeasible(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("normals are not in antipodal pairs spanning the state space")]
    UnpairedNormals,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `{x : ξ_jᵀ(x − c) ≤ b_j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfspacePolytope {
    pub center: Vector,
    pub normals: Vec<Vector>,
    pub offsets: Vec<f64>,
}

/// Indices of an antipodal normal pair: `normals[neg] = −λ normals[pos]`, λ > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalPair {
    pub pos: usize,
    pub neg: usize,
    pub ratio: f64,
}

impl HalfspacePolytope {
    pub fn new(center: Vector, normals: Vec<Vector>, offsets: Vec<f64>) -> Result<Self, SetError> {
        if normals.len() != offsets.len() {
            return Err(SetError::Dimension(format!(
                "{} normals, {} offsets",
                normals.len(),
                offsets.len()
            )));
        }
        for (j, (n, b)) in normals.iter().zip(&offsets).enumerate() {
            if n.len() != center.len() {
                return Err(SetError::Dimension(format!(
                    "normal {j} has length {}",
                    n.len()
                )));
            }
            if n.amax() == 0.0 || !(b.is_finite() && *b > 0.0) {
                return Err(SetError::Infeasible(format!(
                    "facet {j}: normal must be nonzero and offset positive"
                )));
            }
        }
        Ok(Self {
            center,
            normals,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    /// `max_j ξ_jᵀ(x − c) / b_j`; the point is inside iff this is ≤ 1.
    pub fn constraint_value(&self, x: &Vector) -> f64 {
        let d = x - &self.center;
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, b)| n.dot(&d) / b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        let d = x - &self.center;
        self.normals
            .iter()
            .zip(&self.offsets)
            .all(|(n, b)| n.dot(&d) <= b + tol)
    }

    pub fn is_normalized(&self) -> bool {
        self.offsets.iter().all(|b| *b == 1.0)
    }

    /// Pairs every normal with an antipodal partner, in order of first
    /// appearance. Fails unless the pairs span the whole space.
    pub fn antipodal_pairs(&self) -> Result<Vec<NormalPair>, SetError> {
        let m = self.len();
        let mut used = vec![false; m];
        let mut pairs = Vec::with_capacity(m / 2);
        for i in 0..m {
            if used[i] {
                continue;
            }
            let ni = &self.normals[i];
            let partner = (i + 1..m).find(|&j| {
                if used[j] {
                    return false;
                }
                let nj = &self.normals[j];
                let ratio = -nj.dot(ni) / ni.dot(ni);
                ratio > 0.0 && (nj + ni * ratio).amax() <= 1e-12 * nj.amax()
            });
            let Some(j) = partner else {
                return Err(SetError::UnpairedNormals);
            };
            used[i] = true;
            used[j] = true;
            let ratio = -self.normals[j].dot(ni) / ni.dot(ni);
            pairs.push(NormalPair {
                pos: i,
                neg: j,
                ratio,
            });
        }
        if pairs.len() != self.dim() {
            return Err(SetError::UnpairedNormals);
        }
        let m = self.pair_matrix(&pairs);
        if m.clone().lu().try_inverse().is_none() {
            return Err(SetError::UnpairedNormals);
        }
        Ok(pairs)
    }

    /// Rows are the `pos` normals of each pair.
    pub fn pair_matrix(&self, pairs: &[NormalPair]) -> Matrix {
        let n = self.dim();
        let mut m = Matrix::zeros(pairs.len(), n);
        for (row, p) in pairs.iter().enumerate() {
            m.set_row(row, &self.normals[p.pos].transpose());
        }
        m
    }

    /// Vertices of a pair-structured polytope (an affine image of a box).
    pub fn vertices(&self) -> Result<Vec<Vector>, SetError> {
        let pairs = self.antipodal_pairs()?;
        let m = self.pair_matrix(&pairs);
        let m_inv = m.try_inverse().ok_or(SetError::UnpairedNormals)?;
        let lower: Vec<f64> = pairs
            .iter()
            .map(|p| -self.offsets[p.neg] / p.ratio)
            .collect();
        let upper: Vec<f64> = pairs.iter().map(|p| self.offsets[p.pos]).collect();
        let b = AxisBox::new(lower, upper)?;
        Ok(box_vertices(&b)?
            .into_iter()
            .map(|y| &self.center + &m_inv * y)
            .collect())
    }
}

/// Turns per-axis ranges around `center` into the normalized form
/// `±e_i / w_i`, offset 1. Axis `i` contributes facets `2i` (upper) and
/// `2i + 1` (lower).
pub fn normalize_constraints(
    ranges: &[(f64, f64)],
    center: &Vector,
) -> Result<HalfspacePolytope, SetError> {
    let n = center.len();
    if ranges.len() != n {
        return Err(SetError::Dimension(format!(
            "{} ranges for a {n}-dimensional center",
            ranges.len()
        )));
    }
    let mut normals = Vec::with_capacity(2 * n);
    for (i, &(lo, hi)) in ranges.iter().enumerate() {
        let up = hi - center[i];
        let down = center[i] - lo;
        if !(up > 0.0 && down > 0.0 && up.is_finite() && down.is_finite()) {
            return Err(SetError::InvalidRange {
                axis: i,
                detail: format!("[{lo}, {hi}] around {}", center[i]),
            });
        }
        let mut e = Vector::zeros(n);
        e[i] = 1.0 / up;
        normals.push(e);
        let mut e = Vector::zeros(n);
        e[i] = -1.0 / down;
        normals.push(e);
    }
    HalfspacePolytope::new(center.clone(), normals, vec![1.0; 2 * n])
}

/// Symmetric `|x_i − c_i| ≤ w_i` constraints.
pub fn normalize_half_widths(
    half_widths: &[f64],
    center: &Vector,
) -> Result<HalfspacePolytope, SetError> {
    let ranges: Vec<(f64, f64)> = half_widths
        .iter()
        .zip(center.iter())
        .map(|(w, c)| (c - w, c + w))
        .collect();
    normalize_constraints(&ranges, center)
}

/// Same normals, offsets scaled to `√eps`.
pub fn shrink_polytope(c: &HalfspacePolytope, eps: f64) -> Result<HalfspacePolytope, SetError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(SetError::LevelOutOfRange(eps));
    }
    if !c.is_normalized() {
        return Err(SetError::NotNormalized);
    }
    let root = eps.sqrt();
    Ok(HalfspacePolytope {
        center: c.center.clone(),
        normals: c.normals.clone(),
        offsets: vec![root; c.len()],
    })
}

/// `{x : (x − c)ᵀ P (x − c) ≤ level}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vector,
    pub shape: Matrix,
    pub level: f64,
}

impl Ellipsoid {
    pub fn new(center: Vector, shape: Matrix, level: f64) -> Result<Self, SetError> {
        let n = center.len();
        if shape.shape() != (n, n) {
            return Err(SetError::Dimension(format!(
                "shape {}x{} for center of length {n}",
                shape.nrows(),
                shape.ncols()
            )));
        }
        if !(level > 0.0 && level.is_finite()) {
            return Err(SetError::LevelOutOfRange(level));
        }
        let shape = (&shape + shape.transpose()) * 0.5;
        if shape.clone().cholesky().is_none() {
            return Err(SetError::Infeasible(
                "shape matrix is not positive definite".into(),
            ));
        }
        Ok(Self {
            center,
            shape,
            level,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Same shape and center, different level.
    pub fn with_level(&self, level: f64) -> Result<Self, SetError> {
        Self::new(self.center.clone(), self.shape.clone(), level)
    }

    /// Same shape and level around another center.
    pub fn recentered(&self, center: Vector) -> Self {
        Self {
            center,
            shape: self.shape.clone(),
            level: self.level,
        }
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        lyapunov_value(self, x) <= self.level + tol
    }

    /// Support function `max_{x∈E} dᵀ(x − c) = √(level · dᵀP⁻¹d)`.
    pub fn support(&self, d: &Vector) -> f64 {
        let chol = self
            .shape
            .clone()
            .cholesky()
            .expect("shape is positive definite");
        let y = chol.solve(d);
        (self.level * d.dot(&y)).sqrt()
    }

    /// `n` points on the boundary of the projection onto coordinates `(i, j)`.
    pub fn projection_boundary(&self, i: usize, j: usize, n: usize) -> Vec<[f64; 2]> {
        let inv = self
            .shape
            .clone()
            .try_inverse()
            .expect("shape is positive definite");
        let s = nalgebra::Matrix2::new(inv[(i, i)], inv[(i, j)], inv[(j, i)], inv[(j, j)]);
        let l = s
            .cholesky()
            .expect("projected shape is positive definite")
            .l();
        let r = self.level.sqrt();
        (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let v = l * nalgebra::Vector2::new(a.cos(), a.sin()) * r;
                [self.center[i] + v[0], self.center[j] + v[1]]
            })
            .collect()
    }
}

/// `V(x) = (x − c)ᵀ P (x − c)`.
pub fn lyapunov_value(e: &Ellipsoid, x: &Vector) -> f64 {
    let d = x - &e.center;
    d.dot(&(&e.shape * &d))
}

/// How [`invariant_ellipsoid`] builds the shape matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EllipsoidMethod {
    /// Maximum-volume invariant ellipsoid inside the polytope, solved with a
    /// log-barrier Newton method.
    #[default]
    MaxDet,
    /// `A_SCᵀP₀ + P₀A_SC = −W` with `W = diag(weights)` (identity when
    /// absent), scaled until the ellipsoid touches the polytope.
    LyapunovScaled { weights: Option<Vec<f64>> },
}

/// Invariant ellipsoid `{x : (x−c)ᵀP(x−c) ≤ 1}` of `ẋ = A_SC (x − c)` inside `c`.
pub fn invariant_ellipsoid(
    a_sc: &Matrix,
    c: &HalfspacePolytope,
    method: &EllipsoidMethod,
) -> Result<Ellipsoid, SetError> {
    let n = c.dim();
    if a_sc.shape() != (n, n) {
        return Err(SetError::Dimension(format!(
            "A_SC is {}x{}, polytope dimension {n}",
            a_sc.nrows(),
            a_sc.ncols()
        )));
    }
    let abscissa = numerics::spectral_abscissa(a_sc);
    if abscissa >= 0.0 {
        return Err(SetError::NotHurwitz(abscissa));
    }
    if c.is_empty() {
        return Err(SetError::Infeasible("no constraints".into()));
    }
    let x = match method {
        EllipsoidMethod::LyapunovScaled { weights } => {
            let w = match weights {
                Some(w) if w.len() == n && w.iter().all(|v| *v > 0.0) => {
                    Matrix::from_diagonal(&Vector::from_row_slice(w))
                }
                Some(_) => return Err(SetError::Dimension("invalid Lyapunov weights".into())),
                None => Matrix::identity(n, n),
            };
            let p0 = numerics::solve_lyapunov(a_sc, &w)?;
            let x0 = p0
                .try_inverse()
                .ok_or_else(|| SetError::Infeasible("singular Lyapunov solution".into()))?;
            let scale = worst_facet_ratio(&x0, c);
            x0 / scale
        }
        EllipsoidMethod::MaxDet => maxdet::solve(a_sc, c)?,
    };
    let p = x
        .try_inverse()
        .ok_or_else(|| SetError::Infeasible("singular ellipsoid".into()))?;
    Ellipsoid::new(c.center.clone(), p, 1.0)
}

/// `max_j ξ_jᵀ X ξ_j / b_j²`.
fn worst_facet_ratio(x: &Matrix, c: &HalfspacePolytope) -> f64 {
    c.normals
        .iter()
        .zip(&c.offsets)
        .map(|(n, b)| n.dot(&(x * n)) / (b * b))
        .fold(0.0, f64::max)
}

/// Log-barrier interior-point solver for
/// `max log det X  s.t.  A X + X Aᵀ ⪯ 0,  ξ_jᵀ X ξ_j ≤ b_j²`.
mod maxdet {
    use super::*;

    const GAP_TOL: f64 = 1e-10;
    const T_GROWTH: f64 = 10.0;
    const NEWTON_TOL: f64 = 1e-11;
    const MAX_NEWTON: usize = 200;
    const BLOWUP: f64 = 1e14;

    struct Problem<'a> {
        a: &'a Matrix,
        normals: &'a [Vector],
        bounds: Vec<f64>,
        basis: Vec<(usize, usize)>,
        n: usize,
    }

    impl Problem<'_> {
        fn unpack(&self, z: &Vector) -> Matrix {
            let mut x = Matrix::zeros(self.n, self.n);
            for (k, &(i, j)) in self.basis.iter().enumerate() {
                x[(i, j)] = z[k];
                x[(j, i)] = z[k];
            }
            x
        }

        fn lmi(&self, x: &Matrix) -> Matrix {
            let g = -(self.a * x + x * self.a.transpose());
            (&g + g.transpose()) * 0.5
        }

        fn slacks(&self, x: &Matrix) -> Vec<f64> {
            self.normals
                .iter()
                .zip(&self.bounds)
                .map(|(xi, b)| b - xi.dot(&(x * xi)))
                .collect()
        }

        /// Barrier objective, or `None` outside the domain.
        fn value(&self, z: &Vector, t: f64) -> Option<f64> {
            let x = self.unpack(z);
            let cx = x.clone().cholesky()?;
            let cg = self.lmi(&x).cholesky()?;
            let s = self.slacks(&x);
            if s.iter().any(|v| *v <= 0.0) {
                return None;
            }
            let logdet = |l: &Matrix| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Some(-t * logdet(&cx.l()) - logdet(&cg.l()) - s.iter().map(|v| v.ln()).sum::<f64>())
        }

        fn gradient_hessian(&self, z: &Vector, t: f64) -> Option<(Vector, Matrix)> {
            let n = self.n;
            let nv = self.basis.len();
            let x = self.unpack(z);
            let x_inv = x.clone().cholesky()?.inverse();
            let g_inv = self.lmi(&x).cholesky()?.inverse();
            let s = self.slacks(&x);

            // Rows: vec(Y_kᵀ) and vec(Y_k), so tr(Y_k Y_l) = row_k(T) · row_l(V).
            let mut yt = Matrix::zeros(nv, n * n);
            let mut yv = Matrix::zeros(nv, n * n);
            let mut mt = Matrix::zeros(nv, n * n);
            let mut mv = Matrix::zeros(nv, n * n);
            let mut grad = Vector::zeros(nv);
            let mut facet = Matrix::zeros(nv, self.normals.len());

            for (k, &(i, j)) in self.basis.iter().enumerate() {
                let mut e = Matrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let y = &x_inv * &e;
                let l = -(self.a * &e + &e * self.a.transpose());
                let m = &g_inv * &l;
                grad[k] = -t * y.trace() - m.trace();
                for (jdx, (xi, sj)) in self.normals.iter().zip(&s).enumerate() {
                    let q = if i == j {
                        xi[i] * xi[i]
                    } else {
                        2.0 * xi[i] * xi[j]
                    };
                    facet[(k, jdx)] = q / sj;
                    grad[k] += q / sj;
                }
                let ytr = y.transpose();
                let mtr = m.transpose();
                yt.row_mut(k).copy_from_slice(ytr.as_slice());
                yv.row_mut(k).copy_from_slice(y.as_slice());
                mt.row_mut(k).copy_from_slice(mtr.as_slice());
                mv.row_mut(k).copy_from_slice(m.as_slice());
            }
            let hess =
                (&yt * yv.transpose()) * t + &mt * mv.transpose() + &facet * facet.transpose();
            let hess = (&hess + hess.transpose()) * 0.5;
            Some((grad, hess))
        }
    }

    pub(super) fn solve(a: &Matrix, c: &HalfspacePolytope) -> Result<Matrix, SetError> {
        let n = c.dim();
        let basis: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        let problem = Problem {
            a,
            normals: &c.normals,
            bounds: c.offsets.iter().map(|b| b * b).collect(),
            basis,
            n,
        };

        // Strictly feasible start: a scaled Lyapunov solution.
        let x0 = numerics::solve_lyapunov(&a.transpose(), &Matrix::identity(n, n))?;
        let x0 = &x0 * (0.5 / worst_facet_ratio(&x0, c));
        let mut z = Vector::from_iterator(
            problem.basis.len(),
            problem.basis.iter().map(|&(i, j)| x0[(i, j)]),
        );

        let barrier_dim = (2 * n + c.len()) as f64;
        let mut t = 1.0;
        loop {
            let mut converged = false;
            for _ in 0..MAX_NEWTON {
                let (g, h) = problem
                    .gradient_hessian(&z, t)
                    .ok_or_else(|| SetError::Infeasible("left the barrier domain".into()))?;
                let Some(chol) = h.cholesky() else {
                    return Err(SetError::Infeasible("barrier Hessian is singular".into()));
                };
                let step = -chol.solve(&g);
                let decrement = -g.dot(&step);
                if decrement / 2.0 <= NEWTON_TOL {
                    converged = true;
                    break;
                }
                let f0 = problem.value(&z, t).expect("iterate is feasible");
                let mut alpha = 1.0;
                let mut accepted = None;
                while alpha > 1e-12 {
                    let trial = &z + &step * alpha;
                    if let Some(f) = problem.value(&trial, t) {
                        if f <= f0 - 0.25 * alpha * decrement {
                            z = trial;
                            accepted = Some(f);
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                // Round-off floor: no measurable progress left at this t.
                if accepted.is_none_or(|f| f0 - f <= 1e-14 * (1.0 + f0.abs())) {
                    // Numerically at the central point for this t.
                    converged = true;
                    break;
                }
                if z.amax() > BLOWUP {
                    return Err(SetError::Infeasible(
                        "ellipsoid grows without bound (polytope unbounded?)".into(),
                    ));
                }
            }
            if !converged {
                return Err(SetError::Infeasible(
                    "Newton centering did not converge".into(),
                ));
            }
            if barrier_dim / t < GAP_TOL {
                break;
            }
            t *= T_GROWTH;
        }
        Ok(problem.unpack(&z))
    }
}

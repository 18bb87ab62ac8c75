//! Dense linear-algebra kernels for the small (n <= 12) systems used by the
//! controller design and reachability code.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest dimension accepted by [`box_vertices`].
pub const MAX_VERTEX_DIM: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("lyapunov solve failed: {0}")]
    Lyapunov(String),
    #[error("riccati solve did not converge (residual {residual:.3e}): {reason}")]
    Riccati { residual: f64, reason: String },
    #[error("non-finite derivative at state {state:?}")]
    Integration { state: Vec<f64> },
    #[error("box of dimension {0} has too many vertices (limit {MAX_VERTEX_DIM})")]
    TooManyVertices(usize),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

fn require_square(a: &Matrix, what: &str) -> Result<(), NumericsError> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(NumericsError::Dimension(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

// Padé(13) coefficients, Higham (2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// `e^{A t}` by scaling and squaring around a degree-13 Padé approximant.
pub fn mat_exp(a: &Matrix, t: f64) -> Result<Matrix, NumericsError> {
    require_square(a, "A")?;
    let n = a.nrows();
    let at = a * t;
    let norm1 = (0..n)
        .map(|j| at.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > THETA13 {
        (norm1 / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = at / 2f64.powi(squarings);

    let b = &PADE13;
    let ident = Matrix::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let numer = &v + &u;
    let denom = &v - &u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| NumericsError::Dimension("singular Padé denominator".into()))?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// Solves `AᵀP + PA = −Q` for symmetric positive-definite `P`.
///
/// Uses the Kronecker-vectorised system, which is `n²` unknowns (144 at n = 12).
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix, NumericsError> {
    let p = solve_lyapunov_unchecked(a, q)?;
    if p.clone().cholesky().is_none() {
        return Err(NumericsError::Lyapunov(
            "solution is not positive definite (A not Hurwitz?)".into(),
        ));
    }
    Ok(p)
}

/// Lyapunov solve without the definiteness check; used where the right-hand
/// side is only semidefinite.
pub(crate) fn solve_lyapunov_unchecked(a: &Matrix, q: &Matrix) -> Result<Matrix, NumericsError> {
    require_square(a, "A")?;
    if q.shape() != a.shape() {
        return Err(NumericsError::Dimension(format!(
            "Q is {}x{}, A is {}x{}",
            q.nrows(),
            q.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let at = a.transpose();
    let ident = Matrix::identity(n, n);
    // column-major vec: vec(AᵀP) = (I ⊗ Aᵀ) vec P, vec(PA) = (Aᵀ ⊗ I) vec P
    let system = ident.kronecker(&at) + at.kronecker(&ident);
    let rhs = Vector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| NumericsError::Lyapunov("singular Lyapunov operator".into()))?;
    let p = Matrix::from_column_slice(n, n, sol.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::Lyapunov("non-finite solution".into()));
    }
    Ok(p)
}

/// Largest real part over the spectrum of `a`.
pub fn spectral_abscissa(a: &Matrix) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Frobenius norm of the CARE residual `AᵀS + SA − SBR⁻¹BᵀS + Q`.
pub fn care_residual(a: &Matrix, b: &Matrix, q: &Matrix, r_inv: &Matrix, s: &Matrix) -> f64 {
    (a.transpose() * s + s * a - s * b * r_inv * b.transpose() * s + q).norm()
}

const CARE_MAX_NEWTON: usize = 60;
const SIGN_MAX_ITER: usize = 100;

/// Stabilising solution of the continuous algebraic Riccati equation.
///
/// A first solution comes from the matrix sign function of the Hamiltonian;
/// Newton–Kleinman iterations then polish it.
pub fn solve_care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix, NumericsError> {
    require_square(a, "A")?;
    require_square(r, "R")?;
    let n = a.nrows();
    let m = b.ncols();
    if b.nrows() != n || q.shape() != (n, n) || r.nrows() != m {
        return Err(NumericsError::Dimension(format!(
            "A {n}x{n}, B {}x{}, Q {}x{}, R {}x{}",
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| NumericsError::Riccati {
            residual: f64::NAN,
            reason: "R is singular".into(),
        })?;
    let g = b * &r_inv * b.transpose();
    let q_norm = q.norm().max(f64::MIN_POSITIVE);

    let mut s = sign_function_seed(a, q, &g).map_err(|reason| NumericsError::Riccati {
        residual: f64::NAN,
        reason,
    })?;

    // Newton–Kleinman.
    let mut k = &r_inv * b.transpose() * &s;
    let mut residual = care_residual(a, b, q, &r_inv, &s);
    for _ in 0..CARE_MAX_NEWTON {
        let acl = a - b * &k;
        let rhs_q = q + k.transpose() * r * &k;
        let s_next =
            solve_lyapunov_unchecked(&acl, &rhs_q).map_err(|e| NumericsError::Riccati {
                residual,
                reason: e.to_string(),
            })?;
        let k_next = &r_inv * b.transpose() * &s_next;
        let res_next = care_residual(a, b, q, &r_inv, &s_next);
        let step = (&s_next - &s).norm();
        s = s_next;
        k = k_next;
        residual = res_next;
        if residual <= 1e-12 * q_norm || step <= 1e-15 * s.norm().max(1.0) {
            break;
        }
    }
    if residual > 1e-8 * q_norm {
        return Err(NumericsError::Riccati {
            residual,
            reason: "Newton–Kleinman stalled above tolerance".into(),
        });
    }
    if spectral_abscissa(&(a - b * &k)) >= 0.0 {
        return Err(NumericsError::Riccati {
            residual,
            reason: "closed loop is not Hurwitz".into(),
        });
    }
    Ok(s)
}

/// Stable invariant subspace of the Hamiltonian via the scaled Newton
/// iteration for the matrix sign function.
fn sign_function_seed(a: &Matrix, q: &Matrix, g: &Matrix) -> Result<Matrix, String> {
    let n = a.nrows();
    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut w = h;
    let dim = (2 * n) as f64;
    for _ in 0..SIGN_MAX_ITER {
        let lu = w.clone().lu();
        let det = lu.determinant();
        let inv = lu
            .try_inverse()
            .ok_or("Hamiltonian has eigenvalues on the imaginary axis")?;
        let c = if det.is_finite() && det != 0.0 {
            det.abs().powf(-1.0 / dim)
        } else {
            1.0
        };
        let next = (&w * c + inv / c) * 0.5;
        let change = (&next - &w).norm() / next.norm();
        w = next;
        if !change.is_finite() {
            return Err("sign iteration diverged".into());
        }
        if change < 1e-13 {
            break;
        }
    }
    let ident = Matrix::identity(n, n);
    let mut lhs = Matrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n))
        .copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(w.view((n, n), (n, n)) + &ident));
    let mut rhs = Matrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(w.view((0, 0), (n, n)) + &ident)));
    rhs.view_mut((n, 0), (n, n))
        .copy_from(&(-w.view((n, 0), (n, n))));
    let s = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| e.to_string())?;
    let s = (&s + s.transpose()) * 0.5;
    if s.iter().any(|v| !v.is_finite()) {
        return Err("non-finite Riccati seed".into());
    }
    Ok(s)
}

/// One classical fourth-order Runge–Kutta step of `ẋ = f(x, u)` with `u` held.
pub fn rk4_step<F>(f: F, x: &Vector, u: &Vector, dt: f64) -> Result<Vector, NumericsError>
where
    F: Fn(&Vector, &Vector) -> Vector,
{
    let check = |d: Vector, at: &Vector| -> Result<Vector, NumericsError> {
        if d.iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(NumericsError::Integration {
                state: at.iter().copied().collect(),
            })
        }
    };
    let k1 = check(f(x, u), x)?;
    let x2 = x + &k1 * (dt / 2.0);
    let k2 = check(f(&x2, u), &x2)?;
    let x3 = x + &k2 * (dt / 2.0);
    let k3 = check(f(&x3, u), &x3)?;
    let x4 = x + &k3 * dt;
    let k4 = check(f(&x4, u), &x4)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Axis-aligned box `{x : lower_i ≤ x_i ≤ upper_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, NumericsError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(NumericsError::InvalidBox(format!(
                "bound lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(NumericsError::InvalidBox(format!(
                    "axis {i}: lower {lo} must be below upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `center ± half_widths`.
    pub fn centered(center: &[f64], half_widths: &[f64]) -> Result<Self, NumericsError> {
        if center.len() != half_widths.len() {
            return Err(NumericsError::InvalidBox(
                "center/width length mismatch".into(),
            ));
        }
        Self::new(
            center.iter().zip(half_widths).map(|(c, w)| c - w).collect(),
            center.iter().zip(half_widths).map(|(c, w)| c + w).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }
}

/// All `2ⁿ` corners; the first axis varies slowest and lower precedes upper.
pub fn box_vertices(b: &AxisBox) -> Result<Vec<Vector>, NumericsError> {
    let n = b.dim();
    if n > MAX_VERTEX_DIM {
        return Err(NumericsError::TooManyVertices(n));
    }
    Ok((0..1usize << n)
        .map(|mask| {
            Vector::from_iterator(
                n,
                (0..n).map(|i| {
                    if mask >> (n - 1 - i) & 1 == 1 {
                        b.upper[i]
                    } else {
                        b.lower[i]
                    }
                }),
            )
        })
        .collect())
}

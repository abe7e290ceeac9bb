//! Iteration-limited convex QP solver used for every tree-node subproblem.
//!
//! Problems have the form
//!
//! ```text
//! minimize    0.5 y'Qy + c'y
//! subject to  E y  = e          (equalities, e.g. dynamics and the x_k pin)
//!             C y <= b          (general inequality rows)
//!             lo <= y <= hi     (per-variable bounds, e.g. binary pins)
//! ```
//!
//! with `Q` symmetric positive semidefinite. The backend is a proximal-point
//! outer loop around a semismooth Newton method on the Fischer-Burmeister
//! optimality system: degenerate Hessians and redundant rows are fine, and an
//! infeasible problem produces a separating dual ray instead of an error.
//!
//! One *iteration* is one inner Newton step (proximal re-centerings are
//! free). When the iteration budget runs out mid-solve, the best iterate
//! visited so far is returned (lowest primal residual, then lowest objective,
//! then earliest), so tightening the budget can only trade solution quality,
//! never determinism: the iterate sequence does not depend on the limit.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default termination tolerance on both infinity-norm residuals.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

const ALPHA_PEN: f64 = 0.95; // penalized Fischer-Burmeister mixing weight
const SIGMA_INIT: f64 = 1e-6; // initial proximal regularization
const SIGMA_FLOOR: f64 = 1e-9; // regularization floor keeps Newton nonsingular
const SIGMA_SHRINK: f64 = 0.1;
const INNER_MAX: usize = 30; // Newton steps per proximal subproblem
const INNER_CONTRACTION: f64 = 0.25;
const ARMIJO: f64 = 1e-4;
const LINESEARCH_MAX: usize = 40;
const RAY_FLOOR: f64 = 1e-8; // smallest dual movement considered for a ray
const CERT_IMAGE_TOL: f64 = 1e-8; // stricter than the 1e-6 certificate contract
const CERT_SLOPE_TOL: f64 = -1e-6;
const WEIGHT_CAP: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub primal: f64,
    pub dual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { primal: DEFAULT_TOLERANCE, dual: DEFAULT_TOLERANCE }
    }
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Tolerances { primal: tol, dual: tol }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {what}")]
    DimensionMismatch { what: String },
    #[error("hessian is not symmetric positive semidefinite: {why}")]
    NonPsdHessian { why: String },
    #[error("bound lo > hi at variable {index}: [{lo}, {hi}]")]
    InvalidBounds { index: usize, lo: f64, hi: f64 },
}

/// A convex QP instance. Construct through [`QpProblem::new`], which
/// validates dimensions, symmetry, positive semidefiniteness (smallest
/// eigenvalue >= -1e-9) and bound ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear_cost: DVector<f64>,
    pub ineq_rows: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub eq_rows: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub bounds: Vec<(f64, f64)>,
    /// Constant added to reported objective values; does not affect the
    /// minimizer.
    pub objective_offset: f64,
}

impl QpProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hessian: DMatrix<f64>,
        linear_cost: DVector<f64>,
        ineq_rows: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
        eq_rows: DMatrix<f64>,
        eq_rhs: DVector<f64>,
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self, QpError> {
        let n = hessian.nrows();
        if hessian.ncols() != n {
            return Err(QpError::DimensionMismatch { what: format!("hessian {}x{}", n, hessian.ncols()) });
        }
        if linear_cost.len() != n {
            return Err(QpError::DimensionMismatch {
                what: format!("linear cost has {} entries for n = {}", linear_cost.len(), n),
            });
        }
        if ineq_rows.ncols() != n && ineq_rows.nrows() > 0 {
            return Err(QpError::DimensionMismatch {
                what: format!("inequality rows have {} columns for n = {}", ineq_rows.ncols(), n),
            });
        }
        if ineq_rows.nrows() != ineq_rhs.len() {
            return Err(QpError::DimensionMismatch {
                what: format!("{} inequality rows but {} rhs entries", ineq_rows.nrows(), ineq_rhs.len()),
            });
        }
        if eq_rows.ncols() != n && eq_rows.nrows() > 0 {
            return Err(QpError::DimensionMismatch {
                what: format!("equality rows have {} columns for n = {}", eq_rows.ncols(), n),
            });
        }
        if eq_rows.nrows() != eq_rhs.len() {
            return Err(QpError::DimensionMismatch {
                what: format!("{} equality rows but {} rhs entries", eq_rows.nrows(), eq_rhs.len()),
            });
        }
        if bounds.len() != n {
            return Err(QpError::DimensionMismatch {
                what: format!("{} bounds for n = {}", bounds.len(), n),
            });
        }
        validate_bounds(&bounds)?;
        validate_hessian(&hessian)?;
        Ok(QpProblem {
            hessian,
            linear_cost,
            ineq_rows,
            ineq_rhs,
            eq_rows,
            eq_rhs,
            bounds,
            objective_offset: 0.0,
        })
    }

    /// Same problem with replaced variable bounds (used for tree-node pins).
    /// Only the bounds are re-validated; bound edits cannot break the
    /// Hessian or dimension invariants already established.
    pub fn with_bounds(&self, bounds: Vec<(f64, f64)>) -> Result<Self, QpError> {
        if bounds.len() != self.n() {
            return Err(QpError::DimensionMismatch {
                what: format!("{} bounds for n = {}", bounds.len(), self.n()),
            });
        }
        validate_bounds(&bounds)?;
        let mut p = self.clone();
        p.bounds = bounds;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn m(&self) -> usize {
        self.ineq_rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.eq_rows.nrows()
    }

    /// 0.5 y'Qy + c'y + offset.
    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * (y.transpose() * &self.hessian * y)[(0, 0)] + self.linear_cost.dot(y) + self.objective_offset
    }

    /// Infinity norm of the constraint violation at `y`: positive part on
    /// inequality rows and bounds, absolute value on equality rows. A
    /// non-finite point is maximally violated (`f64::max` would silently
    /// drop NaN terms otherwise).
    pub fn violation_inf(&self, y: &DVector<f64>) -> f64 {
        if !y.iter().all(|v| v.is_finite()) {
            return f64::INFINITY;
        }
        let mut viol: f64 = 0.0;
        for i in 0..self.p() {
            viol = viol.max((self.eq_rows.row(i).transpose().dot(y) - self.eq_rhs[i]).abs());
        }
        for i in 0..self.m() {
            viol = viol.max(self.ineq_rows.row(i).transpose().dot(y) - self.ineq_rhs[i]);
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_finite() {
                viol = viol.max(lo - y[j]);
            }
            if hi.is_finite() {
                viol = viol.max(y[j] - hi);
            }
        }
        viol.max(0.0)
    }
}

fn validate_bounds(bounds: &[(f64, f64)]) -> Result<(), QpError> {
    for (index, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo <= hi) {
            return Err(QpError::InvalidBounds { index, lo, hi });
        }
    }
    Ok(())
}

fn validate_hessian(q: &DMatrix<f64>) -> Result<(), QpError> {
    let n = q.nrows();
    let scale = 1.0 + q.amax();
    let mut diagonal_only = true;
    for i in 0..n {
        for j in (i + 1)..n {
            if (q[(i, j)] - q[(j, i)]).abs() > 1e-12 * scale {
                return Err(QpError::NonPsdHessian {
                    why: format!("asymmetric at ({i}, {j}): {} vs {}", q[(i, j)], q[(j, i)]),
                });
            }
            if q[(i, j)] != 0.0 {
                diagonal_only = false;
            }
        }
    }
    if diagonal_only {
        // Diagonal fast path: both example builders emit diagonal Hessians.
        for i in 0..n {
            if q[(i, i)] < -1e-9 {
                return Err(QpError::NonPsdHessian { why: format!("diagonal entry {i} = {}", q[(i, i)]) });
            }
        }
        return Ok(());
    }
    let eig = q.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-9 {
        return Err(QpError::NonPsdHessian { why: format!("smallest eigenvalue {min_eig}") });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    IterationLimited,
    PrimalInfeasible,
}

/// Separating dual ray proving the constraint system empty: `ray >= 0` on
/// inequality/bound rows, `image = C' ray_c + E' ray_e + bound terms ~ 0`,
/// and `b' ray_c + e' ray_e + bound rhs terms < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityCertificate {
    /// Multipliers on the general inequality rows, then lower bounds, then
    /// upper bounds (m + 2n entries, infinity-normalized, nonnegative).
    pub ineq_ray: DVector<f64>,
    /// Multipliers on the equality rows (p entries, free sign).
    pub eq_ray: DVector<f64>,
    /// Infinity norm of the constraint-gradient combination (near zero).
    pub image_inf: f64,
    /// Combined right-hand-side slope (strictly negative).
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub status: QpStatus,
    pub iterate: DVector<f64>,
    /// Dual vector ordered `[ineq (m) | eq (p) | lower (n) | upper (n)]`.
    pub dual: DVector<f64>,
    pub primal_residual_inf: f64,
    pub dual_residual_inf: f64,
    pub iterations_used: usize,
    pub objective: f64,
    pub certificate: Option<InfeasibilityCertificate>,
}

/// Primal (and optionally dual) starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub primal: DVector<f64>,
    pub dual: Option<DVector<f64>>,
}

impl WarmStart {
    pub fn primal_only(primal: DVector<f64>) -> Self {
        WarmStart { primal, dual: None }
    }
}

impl From<&QpResult> for WarmStart {
    fn from(r: &QpResult) -> Self {
        WarmStart { primal: r.iterate.clone(), dual: Some(r.dual.clone()) }
    }
}

/// Infinity-norm accumulator that treats any non-finite term as infinite
/// instead of letting `f64::max` discard a NaN.
fn inf_norm_acc(acc: f64, v: f64) -> f64 {
    if v.is_finite() {
        acc.max(v.abs())
    } else {
        f64::INFINITY
    }
}

/// Plain Fischer-Burmeister function; zero iff a >= 0, b >= 0, ab = 0.
fn phi_fb(a: f64, b: f64) -> f64 {
    a + b - a.hypot(b)
}

fn phi_pen(a: f64, b: f64) -> f64 {
    ALPHA_PEN * phi_fb(a, b) + (1.0 - ALPHA_PEN) * a.max(0.0) * b.max(0.0)
}

/// An element of the generalized gradient of `phi_pen`.
fn phi_pen_grad(a: f64, b: f64) -> (f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        let g = ALPHA_PEN * (1.0 - std::f64::consts::FRAC_1_SQRT_2);
        return (g, g);
    }
    let mut ga = ALPHA_PEN * (1.0 - a / r);
    let mut gb = ALPHA_PEN * (1.0 - b / r);
    if a > 0.0 && b > 0.0 {
        ga += (1.0 - ALPHA_PEN) * b;
        gb += (1.0 - ALPHA_PEN) * a;
    }
    (ga, gb)
}

struct Iterate {
    y: DVector<f64>,
    mu: DVector<f64>,   // equality multipliers
    v_c: DVector<f64>,  // general inequality multipliers
    v_lo: DVector<f64>, // lower-bound multipliers
    v_up: DVector<f64>, // upper-bound multipliers
}

impl Iterate {
    fn zeros(n: usize, m: usize, p: usize) -> Self {
        Iterate {
            y: DVector::zeros(n),
            mu: DVector::zeros(p),
            v_c: DVector::zeros(m),
            v_lo: DVector::zeros(n),
            v_up: DVector::zeros(n),
        }
    }

    fn clone_from_other(&mut self, other: &Iterate) {
        self.y.copy_from(&other.y);
        self.mu.copy_from(&other.mu);
        self.v_c.copy_from(&other.v_c);
        self.v_lo.copy_from(&other.v_lo);
        self.v_up.copy_from(&other.v_up);
    }
}

struct BestIterate {
    x: Iterate,
    primal: f64,
    dual: f64,
    objective: f64,
    iteration: usize,
}

struct Solver<'a> {
    prob: &'a QpProblem,
    n: usize,
    m: usize,
    p: usize,
    // Nonzero column indices per constraint row: a cached access pattern for
    // the rank-one Newton-matrix updates, not a sparse factorization.
    ineq_support: Vec<Vec<usize>>,
    eq_support: Vec<Vec<usize>>,
    finite_lo: Vec<bool>,
    finite_hi: Vec<bool>,
}

/// Residual of the proximal subproblem's optimality system, split by block.
struct SubResidual {
    f1: DVector<f64>,
    f2: DVector<f64>,
    f3_c: DVector<f64>,
    f3_lo: DVector<f64>,
    f3_up: DVector<f64>,
}

impl SubResidual {
    fn zeros(n: usize, m: usize, p: usize) -> Self {
        SubResidual {
            f1: DVector::zeros(n),
            f2: DVector::zeros(p),
            f3_c: DVector::zeros(m),
            f3_lo: DVector::zeros(n),
            f3_up: DVector::zeros(n),
        }
    }

    fn norm_inf(&self) -> f64 {
        let mut acc: f64 = 0.0;
        for v in [&self.f1, &self.f2, &self.f3_c, &self.f3_lo, &self.f3_up] {
            for &e in v.iter() {
                acc = inf_norm_acc(acc, e);
            }
        }
        acc
    }

    fn merit(&self) -> f64 {
        let mut acc = 0.0;
        for v in [&self.f1, &self.f2, &self.f3_c, &self.f3_lo, &self.f3_up] {
            acc += v.norm_squared();
        }
        0.5 * acc
    }
}

impl<'a> Solver<'a> {
    fn new(prob: &'a QpProblem) -> Self {
        let n = prob.n();
        let m = prob.m();
        let p = prob.p();
        let support = |mat: &DMatrix<f64>| -> Vec<Vec<usize>> {
            (0..mat.nrows())
                .map(|i| (0..n).filter(|&j| mat[(i, j)] != 0.0).collect())
                .collect()
        };
        Solver {
            prob,
            n,
            m,
            p,
            ineq_support: support(&prob.ineq_rows),
            eq_support: support(&prob.eq_rows),
            finite_lo: prob.bounds.iter().map(|b| b.0.is_finite()).collect(),
            finite_hi: prob.bounds.iter().map(|b| b.1.is_finite()).collect(),
        }
    }

    /// Infinity-norm KKT residuals of the *original* problem:
    /// (primal violation, stationarity + complementarity).
    fn true_residuals(&self, x: &Iterate) -> (f64, f64) {
        let prob = self.prob;
        let primal = prob.violation_inf(&x.y);
        let mut g = &prob.hessian * &x.y + &prob.linear_cost;
        for i in 0..self.p {
            let mi = x.mu[i];
            if mi != 0.0 {
                for &j in &self.eq_support[i] {
                    g[j] += prob.eq_rows[(i, j)] * mi;
                }
            }
        }
        for i in 0..self.m {
            let vi = x.v_c[i];
            if vi != 0.0 {
                for &j in &self.ineq_support[i] {
                    g[j] += prob.ineq_rows[(i, j)] * vi;
                }
            }
        }
        for j in 0..self.n {
            g[j] += x.v_up[j] - x.v_lo[j];
        }
        let mut dual = g.iter().fold(0.0, |acc, &v| inf_norm_acc(acc, v));
        for i in 0..self.m {
            let slack = prob.ineq_rhs[i] - prob.ineq_rows.row(i).transpose().dot(&x.y);
            dual = inf_norm_acc(dual, phi_fb(slack, x.v_c[i]));
        }
        for j in 0..self.n {
            if self.finite_lo[j] {
                dual = inf_norm_acc(dual, phi_fb(x.y[j] - prob.bounds[j].0, x.v_lo[j]));
            }
            if self.finite_hi[j] {
                dual = inf_norm_acc(dual, phi_fb(prob.bounds[j].1 - x.y[j], x.v_up[j]));
            }
        }
        (primal, dual)
    }

    /// Residual of the proximal subproblem centered at `bar` with weight
    /// `sigma`, evaluated at `x`.
    fn sub_residual(&self, x: &Iterate, bar: &Iterate, sigma: f64, out: &mut SubResidual) {
        let prob = self.prob;
        out.f1.copy_from(&prob.linear_cost);
        out.f1.gemv(1.0, &prob.hessian, &x.y, 1.0);
        for j in 0..self.n {
            out.f1[j] += sigma * (x.y[j] - bar.y[j]) + x.v_up[j] - x.v_lo[j];
        }
        for i in 0..self.p {
            let mi = x.mu[i];
            if mi != 0.0 {
                for &j in &self.eq_support[i] {
                    out.f1[j] += prob.eq_rows[(i, j)] * mi;
                }
            }
        }
        for i in 0..self.m {
            let vi = x.v_c[i];
            if vi != 0.0 {
                for &j in &self.ineq_support[i] {
                    out.f1[j] += prob.ineq_rows[(i, j)] * vi;
                }
            }
        }
        for i in 0..self.p {
            out.f2[i] = prob.eq_rows.row(i).transpose().dot(&x.y) - prob.eq_rhs[i]
                - sigma * (x.mu[i] - bar.mu[i]);
        }
        for i in 0..self.m {
            let s = prob.ineq_rhs[i] - prob.ineq_rows.row(i).transpose().dot(&x.y)
                + sigma * (x.v_c[i] - bar.v_c[i]);
            out.f3_c[i] = phi_pen(s, x.v_c[i]);
        }
        for j in 0..self.n {
            out.f3_lo[j] = if self.finite_lo[j] {
                let s = x.y[j] - prob.bounds[j].0 + sigma * (x.v_lo[j] - bar.v_lo[j]);
                phi_pen(s, x.v_lo[j])
            } else {
                0.0
            };
            out.f3_up[j] = if self.finite_hi[j] {
                let s = prob.bounds[j].1 - x.y[j] + sigma * (x.v_up[j] - bar.v_up[j]);
                phi_pen(s, x.v_up[j])
            } else {
                0.0
            };
        }
    }

    /// One semismooth Newton direction for the subproblem at `x`.
    #[allow(clippy::too_many_arguments)]
    fn newton_direction(
        &self,
        x: &Iterate,
        bar: &Iterate,
        sigma: f64,
        f: &SubResidual,
        k: &mut DMatrix<f64>,
        delta: &mut Iterate,
    ) {
        let prob = self.prob;
        let n = self.n;

        // Per-row derivative data, general rows then bounds: gamma is the
        // slack-side gradient, den the multiplier-side one plus sigma gamma.
        let mut d_c = vec![0.0; self.m];
        let mut w_c = vec![0.0; self.m];
        let mut g_c = vec![0.0; self.m];
        let mut den_c = vec![1.0; self.m];
        for i in 0..self.m {
            let s = prob.ineq_rhs[i] - prob.ineq_rows.row(i).transpose().dot(&x.y)
                + sigma * (x.v_c[i] - bar.v_c[i]);
            let (ga, gb) = phi_pen_grad(s, x.v_c[i]);
            let den = (sigma * ga + gb).max(1e-12);
            d_c[i] = (ga / den).min(WEIGHT_CAP);
            w_c[i] = f.f3_c[i] / den;
            g_c[i] = ga;
            den_c[i] = den;
        }
        let mut d_lo = vec![0.0; n];
        let mut w_lo = vec![0.0; n];
        let mut g_lo = vec![0.0; n];
        let mut den_lo = vec![1.0; n];
        let mut d_up = vec![0.0; n];
        let mut w_up = vec![0.0; n];
        let mut g_up = vec![0.0; n];
        let mut den_up = vec![1.0; n];
        for j in 0..n {
            if self.finite_lo[j] {
                let s = x.y[j] - prob.bounds[j].0 + sigma * (x.v_lo[j] - bar.v_lo[j]);
                let (ga, gb) = phi_pen_grad(s, x.v_lo[j]);
                let den = (sigma * ga + gb).max(1e-12);
                d_lo[j] = (ga / den).min(WEIGHT_CAP);
                w_lo[j] = f.f3_lo[j] / den;
                g_lo[j] = ga;
                den_lo[j] = den;
            }
            if self.finite_hi[j] {
                let s = prob.bounds[j].1 - x.y[j] + sigma * (x.v_up[j] - bar.v_up[j]);
                let (ga, gb) = phi_pen_grad(s, x.v_up[j]);
                let den = (sigma * ga + gb).max(1e-12);
                d_up[j] = (ga / den).min(WEIGHT_CAP);
                w_up[j] = f.f3_up[j] / den;
                g_up[j] = ga;
                den_up[j] = den;
            }
        }

        // K = Q + sigma I + A' D A over all inequality-like rows. Bound rows
        // are +-unit vectors, so they only touch the diagonal.
        k.copy_from(&prob.hessian);
        for j in 0..n {
            k[(j, j)] += sigma + d_lo[j] + d_up[j];
        }
        for i in 0..self.m {
            if d_c[i] == 0.0 {
                continue;
            }
            for &ja in &self.ineq_support[i] {
                let va = prob.ineq_rows[(i, ja)] * d_c[i];
                for &jb in &self.ineq_support[i] {
                    k[(ja, jb)] += va * prob.ineq_rows[(i, jb)];
                }
            }
        }

        // r_y = -F1 + A' (den^-1 F3): bound-lower rows carry -e_j.
        let mut r_y = DVector::zeros(n);
        for j in 0..n {
            r_y[j] = -f.f1[j] - w_lo[j] + w_up[j];
        }
        for i in 0..self.m {
            if w_c[i] != 0.0 {
                for &j in &self.ineq_support[i] {
                    r_y[j] += prob.ineq_rows[(i, j)] * w_c[i];
                }
            }
        }

        // A zero direction makes the line search reject every step length,
        // which the outer loop treats as a stalled cycle; that is the honest
        // outcome when the reduced system cannot be factored.
        let give_up = |delta: &mut Iterate| {
            delta.y.fill(0.0);
            delta.mu.fill(0.0);
            delta.v_c.fill(0.0);
            delta.v_lo.fill(0.0);
            delta.v_up.fill(0.0);
        };
        if !cholesky_with_ridge(k) {
            give_up(delta);
            return;
        }
        if self.p == 0 {
            forward_solve(k, &mut r_y);
            backward_solve(k, &mut r_y);
            delta.y.copy_from(&r_y);
        } else {
            // Schur complement on the equality multipliers keeps the solve
            // well conditioned when sigma is at its floor.
            let mut w_mat = DMatrix::zeros(n, self.p);
            for i in 0..self.p {
                let mut col = DVector::zeros(n);
                for &j in &self.eq_support[i] {
                    col[j] = prob.eq_rows[(i, j)];
                }
                forward_solve(k, &mut col);
                w_mat.set_column(i, &col);
            }
            let mut s_mat = DMatrix::zeros(self.p, self.p);
            s_mat.gemm_tr(1.0, &w_mat, &w_mat, 0.0);
            for i in 0..self.p {
                s_mat[(i, i)] += sigma;
            }
            let mut t1 = r_y.clone();
            forward_solve(k, &mut t1);
            // (E K^-1 E' + sigma I) dmu = E K^-1 r_y + F2
            let mut rhs_mu = DVector::zeros(self.p);
            rhs_mu.gemv_tr(1.0, &w_mat, &t1, 0.0);
            rhs_mu += &f.f2;
            if !cholesky_with_ridge(&mut s_mat) {
                give_up(delta);
                return;
            }
            forward_solve(&s_mat, &mut rhs_mu);
            backward_solve(&s_mat, &mut rhs_mu);
            delta.mu.copy_from(&rhs_mu);
            // K dy = r_y - E' dmu  =>  L' dy = t1 - W dmu
            let mut t2 = t1;
            t2.gemv(-1.0, &w_mat, &rhs_mu, 1.0);
            backward_solve(k, &mut t2);
            delta.y.copy_from(&t2);
        }

        // dv_i = (gamma_i a_i' dy - F3_i) / den_i with a_i the row gradient;
        // lower-bound rows have a_i = -e_j, upper-bound rows a_i = +e_j.
        for i in 0..self.m {
            let a_dy: f64 = self.ineq_support[i]
                .iter()
                .map(|&j| prob.ineq_rows[(i, j)] * delta.y[j])
                .sum();
            delta.v_c[i] = (g_c[i] * a_dy - f.f3_c[i]) / den_c[i];
        }
        for j in 0..n {
            delta.v_lo[j] = if self.finite_lo[j] {
                (g_lo[j] * (-delta.y[j]) - f.f3_lo[j]) / den_lo[j]
            } else {
                0.0
            };
            delta.v_up[j] = if self.finite_hi[j] {
                (g_up[j] * delta.y[j] - f.f3_up[j]) / den_up[j]
            } else {
                0.0
            };
        }
    }

    /// Farkas-ray test on the dual movement over one proximal cycle. Returns
    /// a certificate only after validating it, so a `PrimalInfeasible` status
    /// is sound by construction.
    fn infeasibility_certificate(&self, x: &Iterate, bar: &Iterate) -> Option<InfeasibilityCertificate> {
        let prob = self.prob;
        let mut dn: f64 = 0.0;
        for i in 0..self.p {
            dn = dn.max((x.mu[i] - bar.mu[i]).abs());
        }
        for i in 0..self.m {
            dn = dn.max((x.v_c[i] - bar.v_c[i]).max(0.0));
        }
        for j in 0..self.n {
            dn = dn.max((x.v_lo[j] - bar.v_lo[j]).max(0.0));
            dn = dn.max((x.v_up[j] - bar.v_up[j]).max(0.0));
        }
        if dn <= RAY_FLOOR {
            return None;
        }
        let eq_ray = DVector::from_fn(self.p, |i, _| (x.mu[i] - bar.mu[i]) / dn);
        let mut ineq_ray = DVector::zeros(self.m + 2 * self.n);
        for i in 0..self.m {
            ineq_ray[i] = ((x.v_c[i] - bar.v_c[i]) / dn).max(0.0);
        }
        for j in 0..self.n {
            if self.finite_lo[j] {
                ineq_ray[self.m + j] = ((x.v_lo[j] - bar.v_lo[j]) / dn).max(0.0);
            }
            if self.finite_hi[j] {
                ineq_ray[self.m + self.n + j] = ((x.v_up[j] - bar.v_up[j]) / dn).max(0.0);
            }
        }
        let mut image = DVector::zeros(self.n);
        for i in 0..self.p {
            if eq_ray[i] != 0.0 {
                for &j in &self.eq_support[i] {
                    image[j] += prob.eq_rows[(i, j)] * eq_ray[i];
                }
            }
        }
        for i in 0..self.m {
            if ineq_ray[i] != 0.0 {
                for &j in &self.ineq_support[i] {
                    image[j] += prob.ineq_rows[(i, j)] * ineq_ray[i];
                }
            }
        }
        for j in 0..self.n {
            image[j] += ineq_ray[self.m + self.n + j] - ineq_ray[self.m + j];
        }
        let mut slope = prob.eq_rhs.dot(&eq_ray);
        for i in 0..self.m {
            slope += prob.ineq_rhs[i] * ineq_ray[i];
        }
        for j in 0..self.n {
            if self.finite_lo[j] {
                slope += (-prob.bounds[j].0) * ineq_ray[self.m + j];
            }
            if self.finite_hi[j] {
                slope += prob.bounds[j].1 * ineq_ray[self.m + self.n + j];
            }
        }
        let image_inf = if self.n > 0 { image.amax() } else { 0.0 };
        if image_inf <= CERT_IMAGE_TOL * 2.0 && slope <= CERT_SLOPE_TOL {
            Some(InfeasibilityCertificate { ineq_ray, eq_ray, image_inf, slope })
        } else {
            None
        }
    }

    fn pack_dual(&self, x: &Iterate) -> DVector<f64> {
        let mut dual = DVector::zeros(self.m + self.p + 2 * self.n);
        dual.rows_mut(0, self.m).copy_from(&x.v_c);
        dual.rows_mut(self.m, self.p).copy_from(&x.mu);
        dual.rows_mut(self.m + self.p, self.n).copy_from(&x.v_lo);
        dual.rows_mut(self.m + self.p + self.n, self.n).copy_from(&x.v_up);
        dual
    }
}

/// In-place lower Cholesky. The matrix is SPD in exact arithmetic; roundoff
/// can still drive a computed pivot to zero or below, so pivots are clamped
/// at roundoff level relative to the magnitudes subtracted into them (an
/// absolute clamp would fabricate enormous directions on badly scale-mixed
/// columns). Non-finite values fail the factorization outright so the caller
/// can regularize and retry.
#[must_use]
fn cholesky_in_place(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[(j, j)];
        let mut seen = d.abs();
        for k in 0..j {
            let l = a[(j, k)];
            d -= l * l;
            seen = seen.max(l * l);
        }
        if !d.is_finite() {
            return false;
        }
        let dsq = d.max(seen * 1e-15).max(f64::MIN_POSITIVE).sqrt();
        a[(j, j)] = dsq;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / dsq;
        }
    }
    true
}

/// Factor `a`, escalating a diagonal ridge from a relative epsilon until the
/// factorization succeeds. Returns false only when even a ridge on the order
/// of the matrix scale fails, i.e. the values are already non-finite.
#[must_use]
fn cholesky_with_ridge(a: &mut DMatrix<f64>) -> bool {
    let saved = a.clone();
    if cholesky_in_place(a) {
        return true;
    }
    let n = a.nrows();
    let mut scale: f64 = 0.0;
    for j in 0..n {
        scale = scale.max(saved[(j, j)].abs());
    }
    let scale = 1.0 + scale;
    let mut ridge = scale * 1e-11;
    while ridge <= scale {
        a.copy_from(&saved);
        for j in 0..n {
            a[(j, j)] += ridge;
        }
        if cholesky_in_place(a) {
            return true;
        }
        ridge *= 100.0;
    }
    false
}

fn forward_solve(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

fn backward_solve(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solve a QP with at most `max_iters` Newton iterations. See the module
/// docs for the iteration convention and limit semantics.
pub fn solve_qp(
    problem: &QpProblem,
    warm: Option<&WarmStart>,
    max_iters: usize,
    tol: Tolerances,
) -> Result<QpResult, QpError> {
    let solver = Solver::new(problem);
    let (n, m, p) = (solver.n, solver.m, solver.p);

    let mut x = Iterate::zeros(n, m, p);
    if let Some(w) = warm {
        if w.primal.len() != n {
            return Err(QpError::DimensionMismatch {
                what: format!("warm start has {} entries for n = {}", w.primal.len(), n),
            });
        }
        // A warm start is advisory; a non-finite one is ignored rather than
        // allowed to poison the iteration.
        if w.primal.iter().all(|v| v.is_finite()) {
            x.y.copy_from(&w.primal);
        }
        if let Some(d) = &w.dual {
            if d.len() != m + p + 2 * n {
                return Err(QpError::DimensionMismatch {
                    what: format!("warm dual has {} entries, expected {}", d.len(), m + p + 2 * n),
                });
            }
            if d.iter().all(|v| v.is_finite()) {
                x.v_c.copy_from(&d.rows(0, m).into_owned());
                x.mu.copy_from(&d.rows(m, p).into_owned());
                x.v_lo.copy_from(&d.rows(m + p, n).into_owned());
                x.v_up.copy_from(&d.rows(m + p + n, n).into_owned());
                // Multipliers of absent bounds must stay identically zero.
                for j in 0..n {
                    if !solver.finite_lo[j] {
                        x.v_lo[j] = 0.0;
                    }
                    if !solver.finite_hi[j] {
                        x.v_up[j] = 0.0;
                    }
                }
            }
        }
    }

    let (pr, dr) = solver.true_residuals(&x);
    let mut best = BestIterate {
        primal: pr,
        dual: dr,
        objective: problem.objective(&x.y),
        iteration: 0,
        x: Iterate::zeros(n, m, p),
    };
    best.x.clone_from_other(&x);
    let finish = |status: QpStatus, x: &Iterate, pr: f64, dr: f64, iters: usize,
                  cert: Option<InfeasibilityCertificate>| QpResult {
        status,
        objective: problem.objective(&x.y),
        iterate: x.y.clone(),
        dual: solver.pack_dual(x),
        primal_residual_inf: pr,
        dual_residual_inf: dr,
        iterations_used: iters,
        certificate: cert,
    };
    if pr <= tol.primal && dr <= tol.dual {
        return Ok(finish(QpStatus::Optimal, &x, pr, dr, 0, None));
    }

    let mut bar = Iterate::zeros(n, m, p);
    bar.clone_from_other(&x);
    let mut sigma = SIGMA_INIT;
    let mut newton = 0usize;
    let mut f = SubResidual::zeros(n, m, p);
    let mut k_mat = DMatrix::zeros(n, n);
    let mut delta = Iterate::zeros(n, m, p);
    let mut trial = Iterate::zeros(n, m, p);
    let mut f_trial = SubResidual::zeros(n, m, p);
    let mut rho_bar = pr.max(dr);
    let mut stalled_cycles = 0usize;

    // A proximal cycle always takes at least one Newton step while the true
    // residual is above tolerance, so this cap is unreachable in exact
    // arithmetic; it bounds the loop against floating-point stagnation.
    for _outer in 0..100_000 {
        let inner_target = (INNER_CONTRACTION * rho_bar).max(0.1 * tol.primal.min(tol.dual));
        let mut inner = 0usize;
        loop {
            solver.sub_residual(&x, &bar, sigma, &mut f);
            if f.norm_inf() <= inner_target || inner >= INNER_MAX {
                break;
            }
            if newton >= max_iters {
                let r = finish(
                    QpStatus::IterationLimited,
                    &best.x,
                    best.primal,
                    best.dual,
                    newton,
                    None,
                );
                return Ok(r);
            }
            solver.newton_direction(&x, &bar, sigma, &f, &mut k_mat, &mut delta);
            // Armijo backtracking on the squared subproblem residual. Only a
            // finite, strictly improving trial may be accepted: a direction
            // that improves at no step length is a floating-point dead end
            // for this subproblem, so take no step and let the outer cycle
            // re-center instead of walking into garbage.
            let merit0 = f.merit();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..LINESEARCH_MAX {
                trial.clone_from_other(&x);
                trial.y.axpy(t, &delta.y, 1.0);
                trial.mu.axpy(t, &delta.mu, 1.0);
                trial.v_c.axpy(t, &delta.v_c, 1.0);
                trial.v_lo.axpy(t, &delta.v_lo, 1.0);
                trial.v_up.axpy(t, &delta.v_up, 1.0);
                solver.sub_residual(&trial, &bar, sigma, &mut f_trial);
                let mt = f_trial.merit();
                if mt.is_finite() && mt <= (1.0 - 2.0 * ARMIJO * t) * merit0 {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                stalled_cycles += 1;
                break;
            }
            stalled_cycles = 0;
            x.clone_from_other(&trial);
            newton += 1;
            inner += 1;
            let (pr, dr) = solver.true_residuals(&x);
            let obj = problem.objective(&x.y);
            let better = pr < best.primal
                || (pr == best.primal && obj < best.objective);
            if better {
                best.x.clone_from_other(&x);
                best.primal = pr;
                best.dual = dr;
                best.objective = obj;
                best.iteration = newton;
            }
            if pr <= tol.primal && dr <= tol.dual {
                return Ok(finish(QpStatus::Optimal, &x, pr, dr, newton, None));
            }
        }

        if let Some(cert) = solver.infeasibility_certificate(&x, &bar) {
            let r = finish(
                QpStatus::PrimalInfeasible,
                &best.x,
                best.primal,
                best.dual,
                newton,
                Some(cert),
            );
            return Ok(r);
        }
        if newton >= max_iters {
            let r = finish(
                QpStatus::IterationLimited,
                &best.x,
                best.primal,
                best.dual,
                newton,
                None,
            );
            return Ok(r);
        }
        // Re-centering changes the subproblem, so one stalled line search is
        // recoverable; a run of them spanning the whole sigma ladder is not.
        if stalled_cycles > 10 {
            let r = finish(
                QpStatus::IterationLimited,
                &best.x,
                best.primal,
                best.dual,
                newton,
                None,
            );
            return Ok(r);
        }
        bar.clone_from_other(&x);
        let (pr, dr) = solver.true_residuals(&bar);
        rho_bar = pr.max(dr);
        sigma = (sigma * SIGMA_SHRINK).max(SIGMA_FLOOR);
    }
    Ok(finish(
        QpStatus::IterationLimited,
        &best.x,
        best.primal,
        best.dual,
        newton,
        None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unconstrained(q: Vec<f64>, c: Vec<f64>) -> QpProblem {
        let n = c.len();
        QpProblem::new(
            DMatrix::from_row_slice(n, n, &q),
            DVector::from_vec(c),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_scalar_minimum() {
        // min y^2
        let p = unconstrained(vec![2.0], vec![0.0]);
        let r = solve_qp(&p, None, 100, Tolerances::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert!(r.iterate[0].abs() <= 1e-6);
        assert!(r.iterations_used <= 100);
    }

    #[test]
    fn active_halfspace_projection() {
        // min (y-1)^2 s.t. y <= 0: optimum at the constraint with dual 2.
        let mut p = unconstrained(vec![2.0], vec![-2.0]);
        p.ineq_rows = DMatrix::from_row_slice(1, 1, &[1.0]);
        p.ineq_rhs = DVector::from_vec(vec![0.0]);
        p.objective_offset = 1.0;
        let r = solve_qp(&p, None, 100, Tolerances::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert_abs_diff_eq!(r.iterate[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.dual[0], 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(r.objective, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn crossing_halfspaces_are_certified_infeasible() {
        // y <= -1 and -y <= -1 cannot both hold.
        let mut p = unconstrained(vec![2.0], vec![0.0]);
        p.ineq_rows = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        p.ineq_rhs = DVector::from_vec(vec![-1.0, -1.0]);
        let r = solve_qp(&p, None, 200, Tolerances::default()).unwrap();
        assert_eq!(r.status, QpStatus::PrimalInfeasible);
        let cert = r.certificate.expect("certificate attached");
        // The ray has equal weight on both rows after normalization and a
        // strictly negative slope, b'lambda = -2 at lambda = [1, 1].
        assert!(cert.image_inf <= 1e-6 * (1.0 + 1.0));
        assert!(cert.slope < 0.0);
        assert_abs_diff_eq!(cert.ineq_ray[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(cert.ineq_ray[1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(cert.slope, -2.0, epsilon = 1e-5);
    }

    #[test]
    fn equality_pin_is_exact_at_tolerance() {
        // min y1^2 + y2^2 s.t. y1 + y2 = 1.
        let mut p = unconstrained(vec![2.0, 0.0, 0.0, 2.0], vec![0.0, 0.0]);
        p.eq_rows = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.eq_rhs = DVector::from_vec(vec![1.0]);
        let r = solve_qp(&p, None, 200, Tolerances::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert_abs_diff_eq!(r.iterate[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(r.iterate[1], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn equal_bounds_pin_a_variable() {
        let mut p = unconstrained(vec![2.0, 0.0, 0.0, 2.0], vec![-2.0, 0.0]);
        p.bounds = vec![(f64::NEG_INFINITY, f64::INFINITY), (1.0, 1.0)];
        let r = solve_qp(&p, None, 300, Tolerances::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert_abs_diff_eq!(r.iterate[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.iterate[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn warm_start_idempotence() {
        let mut p = unconstrained(vec![2.0, 0.0, 0.0, 4.0], vec![-2.0, -4.0]);
        p.ineq_rows = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.ineq_rhs = DVector::from_vec(vec![1.0]);
        let first = solve_qp(&p, None, 200, Tolerances::default()).unwrap();
        assert_eq!(first.status, QpStatus::Optimal);
        let warm = WarmStart::from(&first);
        let again = solve_qp(&p, Some(&warm), 200, Tolerances::default()).unwrap();
        assert_eq!(again.status, QpStatus::Optimal);
        assert!(again.iterations_used <= 2, "used {}", again.iterations_used);
        assert!((again.iterate - first.iterate).amax() <= 1e-9);
    }

    #[test]
    fn iteration_limit_returns_best_iterate_and_monotone_residual() {
        let mut p = unconstrained(vec![2.0, 0.0, 0.0, 2.0], vec![-6.0, -8.0]);
        p.ineq_rows = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        p.ineq_rhs = DVector::from_vec(vec![1.0, 0.5]);
        let tol = Tolerances::default();
        // Best-iterate-so-far makes the returned primal residual monotone
        // non-increasing while the budget binds; once the limit admits
        // convergence, every larger limit returns the identical point.
        let mut last = f64::INFINITY;
        let mut converged: Option<QpResult> = None;
        for limit in 1..=60 {
            let r = solve_qp(&p, None, limit, tol).unwrap();
            assert!(r.iterations_used <= limit);
            match (&converged, r.status) {
                (None, QpStatus::IterationLimited) => {
                    assert!(
                        r.primal_residual_inf <= last,
                        "residual rose from {last} to {} at limit {limit}",
                        r.primal_residual_inf
                    );
                    last = r.primal_residual_inf;
                }
                (None, QpStatus::Optimal) => {
                    assert!(r.primal_residual_inf <= tol.primal);
                    assert!(r.dual_residual_inf <= tol.dual);
                    converged = Some(r);
                }
                (Some(first), _) => assert_eq!(&r, first),
                (None, QpStatus::PrimalInfeasible) => panic!("feasible problem"),
            }
        }
        assert!(converged.is_some(), "never converged within 60 iterations");
    }

    #[test]
    fn non_psd_hessian_is_rejected() {
        let err = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), // eigenvalues 3, -1
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            vec![(f64::NEG_INFINITY, f64::INFINITY); 2],
        )
        .unwrap_err();
        assert!(matches!(err, QpError::NonPsdHessian { .. }));
    }

    #[test]
    fn dimension_and_bound_errors() {
        let q = DMatrix::from_row_slice(1, 1, &[2.0]);
        let err = QpProblem::new(
            q.clone(),
            DVector::zeros(2),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            vec![(0.0, 1.0)],
        )
        .unwrap_err();
        assert!(matches!(err, QpError::DimensionMismatch { .. }));
        let err = QpProblem::new(
            q,
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            vec![(1.0, 0.0)],
        )
        .unwrap_err();
        assert_eq!(err, QpError::InvalidBounds { index: 0, lo: 1.0, hi: 0.0 });
    }

    #[test]
    fn psd_but_singular_hessian_is_accepted_and_solved() {
        // min (y1 - y2)^2 s.t. y1 + y2 = 2 has the unique optimum (1, 1).
        let mut p = unconstrained(vec![2.0, -2.0, -2.0, 2.0], vec![0.0, 0.0]);
        p.eq_rows = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.eq_rhs = DVector::from_vec(vec![2.0]);
        let r = solve_qp(&p, None, 400, Tolerances::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert_abs_diff_eq!(r.iterate[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(r.iterate[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn zero_iterate_objective_uses_offset() {
        let mut p = unconstrained(vec![2.0], vec![-0.8]);
        p.objective_offset = 0.16;
        assert_abs_diff_eq!(p.objective(&DVector::from_vec(vec![0.0])), 0.16, epsilon = 0.0);
        assert_abs_diff_eq!(p.objective(&DVector::from_vec(vec![0.4])), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn violation_measure_distinguishes_row_kinds() {
        let mut p = unconstrained(vec![2.0, 0.0, 0.0, 2.0], vec![0.0, 0.0]);
        p.eq_rows = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        p.eq_rhs = DVector::from_vec(vec![3.0]);
        p.ineq_rows = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        p.ineq_rhs = DVector::from_vec(vec![1.0]);
        p.bounds = vec![(-1.0, 5.0), (f64::NEG_INFINITY, 2.0)];
        // Equality undershoot counts with absolute value, satisfied
        // inequality contributes zero, bound violation is one-sided.
        let y = DVector::from_vec(vec![4.0, 0.5]);
        assert_abs_diff_eq!(p.violation_inf(&y), 1.0, epsilon = 1e-15);
        let y = DVector::from_vec(vec![-2.0, 1.5]);
        assert_abs_diff_eq!(p.violation_inf(&y), 5.0, epsilon = 1e-15);
    }
}

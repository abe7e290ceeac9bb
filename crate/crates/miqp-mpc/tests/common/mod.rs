//! Shared oracles and random-problem generators for the integration tests.
//!
//! The oracles are deliberately independent of the solver under test: the QP
//! oracle enumerates active sets and solves KKT systems with a dense LU, and
//! the MIQP oracle enumerates every binary pattern. Both are exponential and
//! only meant for the small problem sizes the tests draw.

#![allow(dead_code)] // each integration test binary uses a different subset

use miqp_mpc::bnb::INTEGRALITY_TOL;
use miqp_mpc::builder::MiqpProblem;
use miqp_mpc::qp::{solve_qp, QpProblem, QpStatus, Tolerances};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Tolerance on oracle-side feasibility and dual-sign checks. Looser than
/// machine epsilon because the KKT solves are plain LU without refinement.
const ORACLE_TOL: f64 = 1e-8;

/// One inequality `row . y <= rhs`, either an original row or a bound in
/// disguise; the oracle treats both uniformly when enumerating active sets.
struct VirtualRow {
    row: DVector<f64>,
    rhs: f64,
}

fn virtual_rows(p: &QpProblem) -> Vec<VirtualRow> {
    let n = p.n();
    let mut rows = Vec::new();
    for i in 0..p.m() {
        rows.push(VirtualRow { row: p.ineq_rows.row(i).transpose().clone_owned(), rhs: p.ineq_rhs[i] });
    }
    for j in 0..n {
        let (lo, hi) = p.bounds[j];
        if lo.is_finite() {
            let mut r = DVector::zeros(n);
            r[j] = -1.0;
            rows.push(VirtualRow { row: r, rhs: -lo });
        }
        if hi.is_finite() {
            let mut r = DVector::zeros(n);
            r[j] = 1.0;
            rows.push(VirtualRow { row: r, rhs: hi });
        }
    }
    rows
}

fn feasible_within(p: &QpProblem, y: &DVector<f64>, tol: f64) -> bool {
    p.violation_inf(y) <= tol
}

/// Globally minimize a strictly convex QP by enumerating active sets.
///
/// Every subset of inequality/bound rows of size <= n is tried as the active
/// set (equalities are always active); the KKT system is solved by LU and a
/// candidate is accepted only if it is primal feasible with nonnegative
/// multipliers on the activated rows. Convexity makes any accepted candidate
/// optimal, so the best objective among them is returned to absorb ties.
///
/// Returns `None` only if no subset passes, which for the generated problems
/// means the tolerance bookkeeping is broken rather than the problem hard.
pub fn oracle_solve_qp(p: &QpProblem) -> Option<DVector<f64>> {
    let n = p.n();
    let np = p.p();
    let rows = virtual_rows(p);
    let r = rows.len();
    assert!(r <= 16, "active-set enumeration capped at 16 rows, got {r}");
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << r) {
        let k = mask.count_ones() as usize;
        if k + np > n {
            continue; // more active rows than degrees of freedom cannot be independent
        }
        let active: Vec<&VirtualRow> = (0..r).filter(|i| mask >> i & 1 == 1).map(|i| &rows[i]).collect();
        let dim = n + k + np;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        for i in 0..n {
            rhs[i] = -p.linear_cost[i];
        }
        for (a, vr) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(j, n + a)] = vr.row[j];
                kkt[(n + a, j)] = vr.row[j];
            }
            rhs[n + a] = vr.rhs;
        }
        for e in 0..np {
            for j in 0..n {
                kkt[(j, n + k + e)] = p.eq_rows[(e, j)];
                kkt[(n + k + e, j)] = p.eq_rows[(e, j)];
            }
            rhs[n + k + e] = p.eq_rhs[e];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let y = sol.rows(0, n).clone_owned();
        let lambda = sol.rows(n, k);
        if lambda.iter().any(|&l| l < -ORACLE_TOL) {
            continue;
        }
        // LU can return garbage on near-singular active sets; re-check
        // stationarity instead of trusting the solve.
        let mut grad = &p.hessian * &y + &p.linear_cost;
        for (a, vr) in active.iter().enumerate() {
            grad += lambda[a] * &vr.row;
        }
        if np > 0 {
            grad += p.eq_rows.transpose() * sol.rows(n + k, np);
        }
        if grad.amax() > 1e-6 || !feasible_within(p, &y, ORACLE_TOL) {
            continue;
        }
        let obj = p.objective(&y);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, y));
        }
    }
    best.map(|(_, y)| y)
}

/// Globally minimize a small MIQP by enumerating all binary patterns and
/// solving each pinned relaxation to convergence. Returns the best feasible
/// `(y, objective)`, or `None` if every pattern is infeasible.
pub fn oracle_solve_miqp(problem: &MiqpProblem) -> Option<(DVector<f64>, f64)> {
    let s = problem.binary_indices.len();
    assert!(s <= 20, "binary enumeration capped at 2^20 patterns, got s = {s}");
    let mut best: Option<(DVector<f64>, f64)> = None;
    for pattern in 0u32..(1 << s) {
        let mut bounds = problem.qp.bounds.clone();
        for (bit, &j) in problem.binary_indices.iter().enumerate() {
            let v = if pattern >> bit & 1 == 1 { 1.0 } else { 0.0 };
            bounds[j] = (v, v);
        }
        let Ok(pinned) = problem.qp.with_bounds(bounds) else { continue };
        let Ok(res) = solve_qp(&pinned, None, 4000, Tolerances::uniform(1e-10)) else {
            continue;
        };
        if res.status != QpStatus::Optimal || !feasible_within(&pinned, &res.iterate, ORACLE_TOL) {
            continue;
        }
        let obj = pinned.objective(&res.iterate);
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((res.iterate, obj));
        }
    }
    best
}

/// Check that every binary coordinate of `y` sits within `INTEGRALITY_TOL`
/// of {0, 1}.
pub fn is_integral(problem: &MiqpProblem, y: &DVector<f64>) -> bool {
    problem
        .binary_indices
        .iter()
        .all(|&j| (y[j] - 0.0).abs() <= INTEGRALITY_TOL || (y[j] - 1.0).abs() <= INTEGRALITY_TOL)
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let eps = rng.gen_range(0.2..1.0);
    l.transpose() * &l + DMatrix::identity(n, n) * eps
}

/// A random strictly convex QP that is feasible by construction: every
/// constraint is placed with slack around a hidden seed point. The combined
/// count of inequality rows and finite bounds stays <= 12 so the active-set
/// oracle enumerates at most 2^12 subsets.
pub fn random_strictly_convex_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.gen_range(2..=8);
    let seed = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let hessian = random_spd(rng, n);
    let linear_cost = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));

    let n_bounded = rng.gen_range(0..=n.min(4));
    let m = rng.gen_range(0..=(12 - 2 * n_bounded));
    let ineq_rows = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut ineq_rhs = &ineq_rows * &seed;
    for v in ineq_rhs.iter_mut() {
        *v += rng.gen_range(0.01..1.5);
    }

    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); n];
    for j in 0..n_bounded {
        bounds[j] = (seed[j] - rng.gen_range(0.05..1.0), seed[j] + rng.gen_range(0.05..1.0));
    }

    let p = rng.gen_range(0..=2.min(n - 1));
    let eq_rows = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
    let eq_rhs = &eq_rows * &seed;

    QpProblem::new(hessian, linear_cost, ineq_rows, ineq_rhs, eq_rows, eq_rhs, bounds)
        .expect("generated QP dimensions are consistent")
}

/// A random MIQP with a hidden integral seed point, so at least one binary
/// pattern is feasible. Binary coordinates keep the [0, 1] box installed by
/// `from_parts`; some continuous coordinates get a finite box around the seed.
pub fn random_feasible_miqp(rng: &mut ChaCha8Rng) -> MiqpProblem {
    let n = rng.gen_range(2..=8);
    let s = rng.gen_range(1..=4.min(n));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..s {
        let pick = rng.gen_range(i..n);
        idx.swap(i, pick);
    }
    let mut binaries = idx[..s].to_vec();
    binaries.sort_unstable();

    let mut seed = DVector::from_fn(n, |_, _| rng.gen_range(-1.5..1.5));
    for &j in &binaries {
        seed[j] = f64::from(rng.gen_range(0..=1u32));
    }

    let hessian = random_spd(rng, n);
    let linear_cost = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));

    let m = rng.gen_range(0..=8);
    let ineq_rows = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut ineq_rhs = &ineq_rows * &seed;
    for v in ineq_rhs.iter_mut() {
        *v += rng.gen_range(0.05..2.0);
    }

    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); n];
    for j in 0..n {
        if !binaries.contains(&j) && rng.gen_bool(0.4) {
            bounds[j] = (seed[j] - rng.gen_range(0.5..3.0), seed[j] + rng.gen_range(0.5..3.0));
        }
    }

    let qp = QpProblem::new(
        hessian,
        linear_cost,
        ineq_rows,
        ineq_rhs,
        DMatrix::zeros(0, n),
        DVector::zeros(0),
        bounds,
    )
    .expect("generated MIQP dimensions are consistent");
    MiqpProblem::from_parts(qp, binaries).expect("binary indices are sorted and in range")
}

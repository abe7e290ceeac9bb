//! Clohessy-Wiltshire relative-motion dynamics for the rendezvous studies.
//!
//! States are `[r_x, r_y, r_z, v_x, v_y, v_z]` in km and km/s in the target's
//! local-vertical/local-horizontal frame. The closed-form state transition
//! matrix over an elapsed time `tau` is, with `w = n_l * tau`,
//! `w_c = cos(w)`, `w_s = sin(w)`:
//!
//! ```text
//!           [ 4 - 3w_c        0   0 ]            [ w_s        2(1 - w_c)   0   ]
//! Phi_rr =  [ 6(w_s - w)      1   0 ]  Phi_rv =  [ 2(w_c - 1) 4w_s - 3w    0   ] / n_l
//!           [ 0               0   w_c ]          [ 0          0            w_s ]
//!
//!           [ 3w_s        0   0    ]             [ w_c    2w_s        0   ]
//! Phi_vr =  [ 6(w_c - 1)  0   0    ] * n_l       [ -2w_s  4w_c - 3    0   ]  = Phi_vv
//!           [ 0           0   -w_s ]             [ 0      0           w_c ]
//! ```
//!
//! Two input models are supported: an impulsive thruster that changes the
//! velocity instantaneously at the start of a step (`b_impulsive`, km/s), and
//! a low-thrust electric thruster held constant over the step (`b_electric`,
//! kN on a spacecraft of mass `m_s` kg, so force/mass comes out in km/s^2).

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

pub type State = SVector<f64, 6>;
pub type Control = SVector<f64, 3>;
pub type StateMatrix = SMatrix<f64, 6, 6>;
pub type InputMatrix = SMatrix<f64, 6, 3>;

/// Orbital and spacecraft constants shared by every step of a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwParams {
    /// Mean motion of the target orbit, 1/s.
    pub n_l: f64,
    /// Spacecraft mass, kg.
    pub m_s: f64,
    /// Sample period, s.
    pub dt: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CwError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("Simpson quadrature needs an even step count >= 2, got {steps}")]
    OddStepCount { steps: usize },
}

impl CwParams {
    pub fn new(n_l: f64, m_s: f64, dt: f64) -> Result<Self, CwError> {
        for (name, value) in [("n_l", n_l), ("m_s", m_s), ("dt", dt)] {
            if !(value > 0.0) {
                return Err(CwError::NonPositive { name, value });
            }
        }
        Ok(CwParams { n_l, m_s, dt })
    }
}

/// State transition matrix after an elapsed time `tau` (s). Exactly the
/// identity at `tau = 0`.
pub fn stm(params: &CwParams, tau: f64) -> StateMatrix {
    let n = params.n_l;
    let w = n * tau;
    let (w_s, w_c) = w.sin_cos();
    #[rustfmt::skip]
    let m = StateMatrix::from_row_slice(&[
        4.0 - 3.0 * w_c,   0.0, 0.0,  w_s / n,               2.0 * (1.0 - w_c) / n,   0.0,
        6.0 * (w_s - w),   1.0, 0.0,  2.0 * (w_c - 1.0) / n, (4.0 * w_s - 3.0 * w) / n, 0.0,
        0.0,               0.0, w_c,  0.0,                   0.0,                     w_s / n,
        3.0 * n * w_s,     0.0, 0.0,  w_c,                   2.0 * w_s,               0.0,
        6.0 * n * (w_c - 1.0), 0.0, 0.0, -2.0 * w_s,         4.0 * w_c - 3.0,         0.0,
        0.0,               0.0, -n * w_s, 0.0,               0.0,                     w_c,
    ]);
    m
}

/// Input matrix for an impulsive velocity change applied at the start of a
/// step: the velocity columns of the step transition matrix.
pub fn b_impulsive(params: &CwParams) -> InputMatrix {
    let phi = stm(params, params.dt);
    phi.fixed_view::<6, 3>(0, 3).into_owned()
}

/// Input matrix for a constant electric thrust held over one step,
/// `B2 = integral_0^dt Phi(tau) [0; I/m_s] dtau`, by composite Simpson
/// quadrature with `steps` (even, >= 2) subintervals.
pub fn b_electric(params: &CwParams, steps: usize) -> Result<InputMatrix, CwError> {
    if steps < 2 || steps % 2 != 0 {
        return Err(CwError::OddStepCount { steps });
    }
    let h = params.dt / steps as f64;
    let integrand = |tau: f64| -> InputMatrix {
        stm(params, tau).fixed_view::<6, 3>(0, 3).into_owned() / params.m_s
    };
    let mut acc = integrand(0.0) + integrand(params.dt);
    for i in 1..steps {
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += weight * integrand(i as f64 * h);
    }
    Ok(acc * (h / 3.0))
}

/// Default Simpson subinterval count used by the builders.
pub const DEFAULT_QUADRATURE_STEPS: usize = 100;

/// One-step propagation with both input channels:
/// `x' = Phi(dt) x + B1 dv + B2 u_e`. Pass zeros for an unused channel.
pub fn propagate(
    params: &CwParams,
    x: &State,
    dv: &Control,
    u_e: &Control,
    quad_steps: usize,
) -> Result<State, CwError> {
    let a = stm(params, params.dt);
    let b1 = b_impulsive(params);
    let b2 = b_electric(params, quad_steps)?;
    Ok(a * x + b1 * dv + b2 * u_e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn paper_params() -> CwParams {
        CwParams::new(1.13e-3, 100.0, 300.0).unwrap()
    }

    #[test]
    fn stm_at_zero_is_identity_exactly() {
        let phi = stm(&paper_params(), 0.0);
        assert_eq!(phi, StateMatrix::identity());
    }

    #[test]
    fn stm_matches_direct_evaluation_at_paper_step() {
        // w = 1.13e-3 * 300 = 0.339 rad; spot-check the radial-radial entry.
        let phi = stm(&paper_params(), 300.0);
        assert_abs_diff_eq!(phi[(0, 0)], 4.0 - 3.0 * 0.339f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(phi[(0, 0)], 1.170_736_956, epsilon = 1e-8);
        assert_abs_diff_eq!(phi[(0, 3)], 294.286_876_89, epsilon = 1e-6);
    }

    #[test]
    fn out_of_plane_block_has_unit_determinant() {
        // The z/vz subsystem is a pure rotation in scaled coordinates:
        // cos^2 + sin^2 = 1.
        let phi = stm(&paper_params(), 300.0);
        let det = phi[(2, 2)] * phi[(5, 5)] - phi[(2, 5)] * phi[(5, 2)];
        assert_abs_diff_eq!(det, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn semigroup_property_holds() {
        let p = paper_params();
        for dt in [60.0, 300.0, 900.0] {
            let lhs = stm(&p, 2.0 * dt);
            let rhs = stm(&p, dt) * stm(&p, dt);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
        // Mixed split as well.
        assert_abs_diff_eq!(stm(&p, 450.0), stm(&p, 300.0) * stm(&p, 150.0), epsilon = 1e-10);
    }

    #[test]
    fn impulsive_matrix_is_velocity_columns() {
        let p = paper_params();
        let phi = stm(&p, p.dt);
        let b1 = b_impulsive(&p);
        for r in 0..6 {
            for c in 0..3 {
                assert_eq!(b1[(r, c)], phi[(r, 3 + c)]);
            }
        }
    }

    #[test]
    fn jump_then_coast_matches_propagate() {
        // An impulse at the start of the step then a coast equals one
        // propagate call with the same impulse.
        let p = paper_params();
        let x = State::from_column_slice(&[10.0, -4.0, 2.0, 0.01, -0.02, 0.003]);
        let dv = Control::new(0.05, -0.01, 0.02);
        let mut jumped = x;
        jumped[3] += dv[0];
        jumped[4] += dv[1];
        jumped[5] += dv[2];
        let coast = stm(&p, p.dt) * jumped;
        let prop = propagate(&p, &x, &dv, &Control::zeros(), 4).unwrap();
        assert_abs_diff_eq!(coast, prop, epsilon = 1e-12);
    }

    #[test]
    fn electric_matrix_small_dt_expansion() {
        // For n_l*dt << 1, B2 ~ [I dt^2/2; I dt] / m_s.
        let p = CwParams::new(1.13e-3, 100.0, 0.5).unwrap();
        let b2 = b_electric(&p, 100).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(b2[(i, i)], 0.5 * p.dt * p.dt / p.m_s, epsilon = 1e-8);
            assert_abs_diff_eq!(b2[(3 + i, i)], p.dt / p.m_s, epsilon = 1e-8);
        }
    }

    #[test]
    fn simpson_self_consistency_under_refinement() {
        // Richardson-style self-check: doubling the subinterval count moves
        // the smooth trigonometric integral by < 1e-12 relative per second.
        let p = paper_params();
        let coarse = b_electric(&p, 100).unwrap();
        let fine = b_electric(&p, 200).unwrap();
        assert!((coarse - fine).amax() <= 1e-12 * fine.amax() * p.dt);
    }

    #[test]
    fn odd_or_tiny_step_counts_are_rejected()
    {
        let p = paper_params();
        assert_eq!(b_electric(&p, 3).unwrap_err(), CwError::OddStepCount { steps: 3 });
        assert_eq!(b_electric(&p, 0).unwrap_err(), CwError::OddStepCount { steps: 0 });
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(matches!(
            CwParams::new(0.0, 100.0, 300.0),
            Err(CwError::NonPositive { name: "n_l", .. })
        ));
        assert!(matches!(
            CwParams::new(1e-3, -1.0, 300.0),
            Err(CwError::NonPositive { name: "m_s", .. })
        ));
    }

    #[test]
    fn stm_is_continuous_in_tau() {
        let p = paper_params();
        let a = stm(&p, 300.0);
        let b = stm(&p, 300.0 + 1e-9);
        assert!((a - b).amax() < 1e-6);
    }
}

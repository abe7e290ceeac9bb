//! Closed-loop properties: warm-start carry across samples, one-sided
//! suboptimality against the converged oracle, budget and mode bookkeeping
//! in recorded traces, and agreement with a brute-force enumeration MPC.

mod common;

use common::is_integral;
use miqp_mpc::bnb::{BranchRule, MiqpStatus};
use miqp_mpc::builder::{
    build_min_thrust, extract_control, BlockName, MinThrustWeights, TerminalBox, ThrustLimits,
};
use miqp_mpc::cw::{b_electric, propagate, stm, Control, CwParams, State, DEFAULT_QUADRATURE_STEPS};
use miqp_mpc::qp::{solve_qp, QpStatus, Tolerances};
use miqp_mpc::sim::{oracle_trajectory, run_closed_loop, ControlMode, Scenario, SimOutcome};
use miqp_mpc::uniting::{IterationSchedule, LyapunovConfig, LyapunovKind, Mode};
use nalgebra::DVector;

fn paper_cw() -> CwParams {
    CwParams::new(1.13e-3, 100.0, 300.0).unwrap()
}

/// Scaled-down minimum-thrust scenario used across these tests; the weights
/// match the bundled ex2 toy scenarios.
fn toy_scenario(mode: ControlMode, schedule: IterationSchedule) -> Scenario {
    Scenario {
        example: miqp_mpc::builder::ExampleKind::MinThrust,
        x0: State::from_column_slice(&[10.0, 0.0, 0.0, 0.0, -0.05, 0.0]),
        horizon: 5,
        samples: 12,
        mode,
        schedule,
        lyapunov: LyapunovConfig::new(LyapunovKind::Objective, 1.0, 1e-2, 0.05, 0.5).unwrap(),
        prune_rule: BranchRule::DepthFirst,
        dynamics: paper_cw(),
        switching_weights: Default::default(),
        switching_boxes: Default::default(),
        big_m: 0.1,
        min_thrust_weights: MinThrustWeights { state_weight: 1e-3, thrust_weight: 1e2 },
        thrust_limits: ThrustLimits { v_min: 1e-4, v_max: 5e-3 },
        terminal_box: TerminalBox::default(),
        node_tol: Tolerances::uniform(1e-6),
        rng_seed: 0,
    }
}

#[test]
fn warm_carry_shifts_feasibly_except_terminal_rows() {
    let cw = paper_cw();
    let x0 = State::from_column_slice(&[0.05, 0.02, -0.01, 1e-5, -1e-5, 5e-6]);
    let horizon = 5;
    let mut problem = build_min_thrust(
        &cw,
        &x0,
        horizon,
        &MinThrustWeights { state_weight: 1e-3, thrust_weight: 1e2 },
        &ThrustLimits { v_min: 1e-4, v_max: 5e-3 },
        // Sized so the burn-burn-coast plan below is strictly feasible while
        // one extra coast step drifts the predicted terminal out of the box.
        &TerminalBox { pos_halfwidth: 0.2, vel_halfwidth: 1e-3 },
    )
    .unwrap();

    // Hand-built integral incumbent: two small burns, then coast, with the
    // states propagated by the same matrices the builder stacked. Exactly
    // feasible by construction, which is the premise of the carry property.
    let a = stm(&cw, cw.dt);
    let b2 = b_electric(&cw, DEFAULT_QUADRATURE_STEPS).unwrap();
    let burns: [Control; 5] = [
        Control::new(-1e-4, -5e-5, 2.5e-5),
        Control::new(6e-5, 0.0, -6e-5),
        Control::zeros(),
        Control::zeros(),
        Control::zeros(),
    ];
    let mut y = DVector::zeros(problem.qp.n());
    let zeta = problem.layout.block(BlockName::State).unwrap().clone();
    let v = problem.layout.block(BlockName::Thrust).unwrap().clone();
    let vp = problem.layout.block(BlockName::ThrustPlus).unwrap().clone();
    let vm = problem.layout.block(BlockName::ThrustMinus).unwrap().clone();
    let bins = problem.layout.block(BlockName::StepBinaries).unwrap().clone();
    let mut x = x0;
    for k in 0..horizon {
        for (i, slot) in zeta.step_range(k).enumerate() {
            y[slot] = x[i];
        }
        let g = bins.step_range(k).start;
        for i in 0..3 {
            let vi = burns[k][i];
            y[v.step_range(k).start + i] = vi;
            y[vp.step_range(k).start + i] = vi.max(0.0);
            y[vm.step_range(k).start + i] = (-vi).max(0.0);
            y[g + i] = f64::from(vi > 0.0);
            y[g + 3 + i] = f64::from(vi < 0.0);
        }
        y[g + 6] = f64::from(burns[k].amax() > 0.0);
        x = a * x + b2 * burns[k];
    }
    assert!(problem.qp.violation_inf(&y) <= 1e-12, "hand-built plan must be exactly feasible");
    assert!(is_integral(&problem, &y));

    // Apply the first control to the noiseless plant, advance the problem.
    let u = extract_control(&y, &problem.extractor, problem.example).unwrap();
    let burn = Control::from_column_slice(&[u[0], u[1], u[2]]);
    let x1 = propagate(&cw, &x0, &Control::zeros(), &burn, DEFAULT_QUADRATURE_STEPS).unwrap();
    let shifted = problem.shift_solution(&y).unwrap();
    problem.set_state(&x1).unwrap();

    // The shifted point stays integral and satisfies everything except
    // possibly the terminal-box rows (the last 12 inequality rows).
    assert!(is_integral(&problem, &shifted));
    let qp = &problem.qp;
    let terminal_start = qp.m() - 12;
    let lhs = &qp.ineq_rows * &shifted;
    for i in 0..terminal_start {
        assert!(
            lhs[i] - qp.ineq_rhs[i] <= 1e-9,
            "non-terminal inequality row {i} violated by {}",
            lhs[i] - qp.ineq_rhs[i]
        );
    }
    let eq = &qp.eq_rows * &shifted - &qp.eq_rhs;
    assert!(eq.amax() <= 1e-9, "equality rows must carry over, worst {}", eq.amax());
    for j in 0..qp.n() {
        let (lo, hi) = qp.bounds[j];
        assert!(shifted[j] >= lo - 1e-12 && shifted[j] <= hi + 1e-12, "bound {j} broken");
    }

    // On this instance the carve-out is not vacuous: the coasted terminal
    // prediction leaves the position box by a visible margin.
    let worst_terminal = (terminal_start..qp.m())
        .map(|i| lhs[i] - qp.ineq_rhs[i])
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(worst_terminal > 0.05, "expected a real terminal violation, got {worst_terminal}");
}

#[test]
fn limited_runs_never_beat_the_oracle_at_start() {
    // One step and one sample: with 7 binaries the oracle budget of 2^8
    // node solves exhausts the whole tree, so its psi is the converged
    // optimum for the k = 0 problem that every limited run also starts from.
    let mut base =
        toy_scenario(ControlMode::FixedLimits, IterationSchedule::bnb_limited(9, 9, 400).unwrap());
    base.x0 = State::from_column_slice(&[0.05, 0.02, -0.01, 1e-5, -1e-5, 5e-6]);
    base.horizon = 1;
    base.samples = 1;
    let oracle = oracle_trajectory(&base).unwrap();
    assert_eq!(oracle.outcome, SimOutcome::Completed);

    // A depth-first dive to the leaf takes eight node solves, so each of
    // these budgets yields an integral incumbent; suboptimality is one-sided.
    for i_b in [9, 12, 24] {
        let mut sc = base.clone();
        sc.schedule = IterationSchedule::bnb_limited(i_b, i_b, 400).unwrap();
        let trace = run_closed_loop(&sc).unwrap();
        let row = &trace.rows[0];
        assert!(
            matches!(row.status, MiqpStatus::IntegralOptimal | MiqpStatus::IntegralFeasible),
            "i_b = {i_b}: expected an integral incumbent, got {:?}",
            row.status
        );
        assert!(
            row.psi >= oracle.rows[0].psi - 1e-9,
            "i_b = {i_b}: limited psi {} undercuts oracle psi {}",
            row.psi,
            oracle.rows[0].psi
        );
    }
}

#[test]
fn trace_bookkeeping_matches_the_schedule() {
    let schedule = IterationSchedule::bnb_limited(2, 16, 100).unwrap();
    let sc = toy_scenario(ControlMode::Uniting, schedule);
    let trace = run_closed_loop(&sc).unwrap();
    assert_eq!(trace.outcome, SimOutcome::Completed);
    assert_eq!(trace.rows.len(), sc.samples);

    let mut switches = 0;
    for row in &trace.rows {
        assert!(row.q <= 1);
        let limits = schedule.effective(Mode::from_bit(row.q).unwrap());
        // The budget admits up to two final solves past the node limit, and
        // every node solve is capped by the per-node QP limit.
        assert!(row.ib_used <= limits.i_b + 2, "row {}: ib_used {} over budget", row.k, row.ib_used);
        assert!(
            row.iqp_total <= row.ib_used * limits.i_qp as u64,
            "row {}: iqp_total {} exceeds {} node solves at {} each",
            row.k,
            row.iqp_total,
            row.ib_used,
            limits.i_qp
        );
        assert!(row.v >= 0.0, "Lyapunov value must be nonnegative");
        if row.switched {
            switches += 1;
        }
    }
    assert_eq!(trace.summary.switch_count, switches);
}

/// Enumerated per-step binary configurations for the minimum-thrust problem:
/// a closed gate forces all sign binaries to zero, an open gate admits
/// (s+, s-) in {(0,0), (1,0), (0,1)} per axis. Patterns with s+ = s- = 1 are
/// infeasible by the s+ + s- <= z row, so skipping them loses nothing.
fn step_configs() -> Vec<Vec<f64>> {
    let mut configs = vec![vec![0.0; 7]];
    let axis_choices = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                let mut cfg = vec![0.0; 7];
                cfg[6] = 1.0;
                for (i, &(p, m)) in [axis_choices[a], axis_choices[b], axis_choices[c]].iter().enumerate() {
                    cfg[i] = p;
                    cfg[3 + i] = m;
                }
                configs.push(cfg);
            }
        }
    }
    configs
}

#[test]
fn oracle_matches_brute_force_enumeration_mpc() {
    let mut sc =
        toy_scenario(ControlMode::FixedLimits, IterationSchedule::bnb_limited(2, 2, 100).unwrap());
    // Just outside the terminal position box, so the first sample has to
    // open the gate and burn; later samples mostly coast. One step keeps
    // both the oracle tree and the enumeration small.
    sc.x0 = State::from_column_slice(&[0.12, -0.08, 0.05, 1e-5, -1e-5, 5e-6]);
    sc.horizon = 1;
    sc.samples = 6;
    let oracle = oracle_trajectory(&sc).unwrap();
    assert_eq!(oracle.outcome, SimOutcome::Completed);

    // Brute-force MPC: at each sample enumerate every valid binary pattern,
    // solve the pinned convex QP to convergence, keep the best feasible
    // objective, and apply its first control to the plant.
    let cw = sc.dynamics;
    let configs = step_configs();
    let mut x = sc.x0;
    let mut problem = build_min_thrust(
        &cw,
        &x,
        sc.horizon,
        &sc.min_thrust_weights,
        &sc.thrust_limits,
        &sc.terminal_box,
    )
    .unwrap();
    for (k, row) in oracle.rows.iter().enumerate() {
        problem.set_state(&x).unwrap();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for cfg in &configs {
            let mut bounds = problem.qp.bounds.clone();
            for (off, &v) in cfg.iter().enumerate() {
                bounds[problem.binary_indices[off]] = (v, v);
            }
            let pinned = problem.qp.with_bounds(bounds).unwrap();
            // Tight budget: feasible patterns converge in well under 500
            // iterations at this size; the rest are infeasible pins.
            let Ok(res) = solve_qp(&pinned, None, 500, Tolerances::uniform(1e-9)) else {
                continue;
            };
            if res.status != QpStatus::Optimal || pinned.violation_inf(&res.iterate) > 1e-8 {
                continue;
            }
            let obj = pinned.objective(&res.iterate);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, res.iterate));
            }
        }
        let (_, y) = best.expect("brute force must find a feasible pattern");
        let diff = (x - row.x).amax();
        assert!(diff <= 1e-6, "sample {k}: states diverge by {diff}");
        let u = extract_control(&y, &problem.extractor, problem.example).unwrap();
        let burn = Control::from_column_slice(&[u[0], u[1], u[2]]);
        x = propagate(&cw, &x, &Control::zeros(), &burn, DEFAULT_QUADRATURE_STEPS).unwrap();
    }
    let diff = (x - oracle.final_state).amax();
    assert!(diff <= 1e-6, "final states diverge by {diff}");
}

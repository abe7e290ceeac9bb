//! Closed-loop experiment runner: fixed-limit and supervised runs over the
//! rendezvous examples, a converged-solve oracle baseline, and the tracking
//! and average-iteration metrics used to compare them.

use nalgebra::Vector3;
use thiserror::Error;

use crate::bnb::{BranchRule, MiqpStatus, TreeLogEntry};
use crate::builder::{
    build_min_thrust, build_switching_thrusters, BuilderError, ExampleKind, MinThrustWeights,
    MiqpProblem, SwitchingBoxes, SwitchingWeights, TerminalBox, ThrustLimits,
};
use crate::cw::{propagate, CwError, CwParams, State, DEFAULT_QUADRATURE_STEPS};
use crate::qp::Tolerances;
use crate::uniting::{IterationSchedule, LimitedAxis, LyapunovConfig, Supervisor, UnitingError};

/// Samples the per-trace iteration averages are taken over by default.
pub const METRIC_WINDOW: usize = 30;
/// Effectively unlimited per-node QP budget for oracle solves.
pub const ORACLE_IQP: usize = 5000;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {what}")]
    InvalidScenario { what: String },
    #[error("traces have different lengths: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("average over an empty window")]
    EmptyWindow,
    #[error("sample {sample} not reached: run ended after {available} samples")]
    SampleOutOfRange { sample: usize, available: usize },
    #[error(transparent)]
    Uniting(#[from] UnitingError),
    #[error(transparent)]
    Builder(#[from] BuilderError),
    #[error(transparent)]
    Cw(#[from] CwError),
}

/// Whether the supervisor switches limits or they stay pinned for the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    FixedLimits,
    Uniting,
}

/// Everything needed to reproduce one closed-loop run. Runs are
/// deterministic given the scenario; `rng_seed` only parameterizes
/// randomized test harnesses built on top.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub example: ExampleKind,
    pub x0: State,
    pub horizon: usize,
    pub samples: usize,
    pub mode: ControlMode,
    pub schedule: IterationSchedule,
    pub lyapunov: LyapunovConfig,
    pub prune_rule: BranchRule,
    pub dynamics: CwParams,
    pub switching_weights: SwitchingWeights,
    pub switching_boxes: SwitchingBoxes,
    pub big_m: f64,
    pub min_thrust_weights: MinThrustWeights,
    pub thrust_limits: ThrustLimits,
    pub terminal_box: TerminalBox,
    pub node_tol: Tolerances,
    pub rng_seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.samples < 1 {
            return Err(SimError::InvalidScenario { what: "samples must be at least 1".into() });
        }
        if self.example == ExampleKind::Generic {
            return Err(SimError::InvalidScenario {
                what: "scenario example must be a rendezvous instance".into(),
            });
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(SimError::InvalidScenario { what: "x0 must be finite".into() });
        }
        self.schedule.validate()?;
        LyapunovConfig::new(
            self.lyapunov.kind,
            self.lyapunov.theta,
            self.lyapunov.sigma,
            self.lyapunov.c0,
            self.lyapunov.c1,
        )?;
        Ok(())
    }

    /// Number of binary variables in this scenario's horizon problem.
    pub fn binary_count(&self) -> usize {
        match self.example {
            ExampleKind::SwitchingThrusters => self.horizon,
            ExampleKind::MinThrust => 7 * self.horizon,
            ExampleKind::Generic => 0,
        }
    }

    fn build_problem(&self) -> Result<MiqpProblem, BuilderError> {
        match self.example {
            ExampleKind::SwitchingThrusters => build_switching_thrusters(
                &self.dynamics,
                &self.x0,
                self.horizon,
                &self.switching_weights,
                self.big_m,
                &self.switching_boxes,
            ),
            ExampleKind::MinThrust => build_min_thrust(
                &self.dynamics,
                &self.x0,
                self.horizon,
                &self.min_thrust_weights,
                &self.thrust_limits,
                &self.terminal_box,
            ),
            ExampleKind::Generic => unreachable!("validated"),
        }
    }

    fn apply_control(&self, x: &State, u: &[f64; 6]) -> Result<State, CwError> {
        let (dv, ue) = match self.example {
            ExampleKind::SwitchingThrusters => {
                (Vector3::new(u[0], u[1], u[2]), Vector3::new(u[3], u[4], u[5]))
            }
            _ => (Vector3::zeros(), Vector3::new(u[0], u[1], u[2])),
        };
        propagate(&self.dynamics, x, &dv, &ue, DEFAULT_QUADRATURE_STEPS)
    }
}

/// One recorded sample: the pre-control state, the applied control
/// (zero-padded to six entries), and the solve diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub k: usize,
    pub x: State,
    pub u: [f64; 6],
    pub q: u8,
    pub v: f64,
    pub psi: f64,
    pub viol_inf: f64,
    pub ib_used: u64,
    pub iqp_total: u64,
    pub status: MiqpStatus,
    pub switched: bool,
}

/// How a run ended. Aborts keep the rows recorded so far; `at` is the sample
/// index at which the abort was detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimOutcome {
    Completed,
    Unstable { at: usize },
    Infeasible { at: usize },
}

impl SimOutcome {
    pub fn is_completed(self) -> bool {
        self == SimOutcome::Completed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    /// l2 norm of the state after the last recorded sample's propagation.
    pub final_error_l2: f64,
    pub switch_count: usize,
    /// Samples the iteration averages cover (first `min(METRIC_WINDOW, rows)`).
    pub window: usize,
    pub avg_ib: f64,
    pub avg_iqp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub rows: Vec<SimRow>,
    pub final_state: State,
    pub summary: SimSummary,
    pub outcome: SimOutcome,
}

fn summarize(rows: &[SimRow], final_state: &State) -> SimSummary {
    let window = rows.len().min(METRIC_WINDOW);
    let mean = |f: &dyn Fn(&SimRow) -> f64| {
        if window == 0 {
            0.0
        } else {
            rows[..window].iter().map(|r| f(r)).sum::<f64>() / window as f64
        }
    };
    SimSummary {
        final_error_l2: final_state.norm(),
        switch_count: rows.iter().filter(|r| r.switched).count(),
        window,
        avg_ib: mean(&|r| r.ib_used as f64),
        avg_iqp: mean(&|r| r.iqp_total as f64),
    }
}

/// Run one closed-loop experiment. Infeasible controller solves and
/// divergence abort the run with a partial trace rather than an error; only
/// malformed scenarios error.
pub fn run_closed_loop(scenario: &Scenario) -> Result<SimTrace, SimError> {
    run_inner(scenario, None).map(|(trace, _)| trace)
}

/// The branch-and-bound log of the solve at one sample, obtained by
/// replaying the closed loop up to it. Errors if the run aborts earlier.
pub fn tree_log_at_sample(
    scenario: &Scenario,
    sample: usize,
) -> Result<Vec<TreeLogEntry>, SimError> {
    if sample >= scenario.samples {
        return Err(SimError::SampleOutOfRange { sample, available: scenario.samples });
    }
    let (trace, log) = run_inner(scenario, Some(sample))?;
    log.ok_or(SimError::SampleOutOfRange { sample, available: trace.rows.len() })
}

fn run_inner(
    scenario: &Scenario,
    capture: Option<usize>,
) -> Result<(SimTrace, Option<Vec<TreeLogEntry>>), SimError> {
    scenario.validate()?;
    let mut problem = scenario.build_problem()?;
    // Fixed-limit runs reuse the supervisor machinery with unreachable
    // thresholds: the mode stays high (its limits are the pinned ones) and V
    // is still evaluated for the trace.
    let cfg = match scenario.mode {
        ControlMode::Uniting => scenario.lyapunov,
        ControlMode::FixedLimits => LyapunovConfig {
            c0: f64::NEG_INFINITY,
            c1: f64::INFINITY,
            ..scenario.lyapunov
        },
    };
    let mut sup = Supervisor::new(cfg, scenario.schedule)?;
    let mut x = scenario.x0;
    let guard = (100.0 * x.norm()).max(1e-6);
    let mut rows = Vec::with_capacity(scenario.samples);
    let mut outcome = SimOutcome::Completed;
    let mut captured = None;
    for k in 0..scenario.samples {
        let step = match sup.step(&mut problem, &x, scenario.prune_rule, scenario.node_tol) {
            Ok(s) => s,
            Err(UnitingError::ControllerInfeasible { sample }) => {
                outcome = SimOutcome::Infeasible { at: sample };
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let mut u = [0.0; 6];
        for (i, &v) in step.u.iter().enumerate().take(6) {
            u[i] = v;
        }
        rows.push(SimRow {
            k,
            x,
            u,
            q: step.q_used.bit(),
            v: step.v,
            psi: step.psi,
            viol_inf: step.viol_inf,
            ib_used: step.result.bnb_iterations_used,
            iqp_total: step.result.qp_iterations_total,
            status: step.result.status,
            switched: step.switched,
        });
        if capture == Some(k) {
            captured = Some(step.result.tree_log);
            break;
        }
        x = scenario.apply_control(&x, &u)?;
        if x.norm() > guard {
            outcome = SimOutcome::Unstable { at: k + 1 };
            break;
        }
    }
    let summary = summarize(&rows, &x);
    Ok((SimTrace { rows, final_state: x, summary, outcome }, captured))
}

/// Converged-solve baseline of the same scenario: an exhaustive
/// branch-and-bound budget, an effectively unlimited per-node QP budget,
/// best-first pruning, and tight node tolerances, with fixed limits.
pub fn oracle_trajectory(scenario: &Scenario) -> Result<SimTrace, SimError> {
    let s = scenario.binary_count() as u32;
    let i_b = if s >= 63 { u64::MAX } else { 1u64 << (s + 1) };
    let mut oracle = scenario.clone();
    oracle.mode = ControlMode::FixedLimits;
    oracle.prune_rule = BranchRule::BestFirst;
    oracle.schedule = IterationSchedule::bnb_limited(i_b, i_b, ORACLE_IQP)?;
    oracle.node_tol = Tolerances::uniform(1e-9);
    run_closed_loop(&oracle)
}

/// Per-sample l2 distance between the states of two traces.
pub fn tracking_error(trace: &SimTrace, reference: &SimTrace) -> Result<Vec<f64>, SimError> {
    if trace.rows.len() != reference.rows.len() {
        return Err(SimError::LengthMismatch { a: trace.rows.len(), b: reference.rows.len() });
    }
    Ok(trace
        .rows
        .iter()
        .zip(&reference.rows)
        .map(|(a, b)| (a.x - b.x).norm())
        .collect())
}

/// Mean iteration usage on one solver axis over the first `window` samples.
pub fn average_iterations(
    trace: &SimTrace,
    axis: LimitedAxis,
    window: usize,
) -> Result<f64, SimError> {
    if window == 0 {
        return Err(SimError::EmptyWindow);
    }
    if window > trace.rows.len() {
        return Err(SimError::LengthMismatch { a: window, b: trace.rows.len() });
    }
    let sum: f64 = trace.rows[..window]
        .iter()
        .map(|r| match axis {
            LimitedAxis::BranchAndBound => r.ib_used as f64,
            LimitedAxis::QuadraticProgramming => r.iqp_total as f64,
        })
        .sum();
    Ok(sum / window as f64)
}

//! Uniting supervisor: a hysteresis automaton that switches the controller
//! between a cheap low-effort solver configuration and an expensive
//! high-effort one, driven by a Lyapunov-like measure of closed-loop
//! progress.
//!
//! The logic mode `q` starts high. While high, the supervisor waits for the
//! measure `V` to fall to `c0` and then hands control to the low-effort
//! configuration; if `V` later climbs back to `c1 > c0`, the high-effort
//! configuration takes over again. Values strictly inside `(c0, c1)` never
//! switch, so the gap is a genuine hysteresis band: each switch requires `V`
//! to traverse it, which rules out chattering between the modes.
//!
//! Only one solver axis is iteration-limited at a time — either the number
//! of branch-and-bound node solves or the number of QP iterations per node —
//! and the other axis stays at a fixed base value in both modes.

use nalgebra::DVector;
use thiserror::Error;

use crate::bnb::{solve_miqp_opts, BranchRule, Incumbent, MiqpResult, MiqpStatus};
use crate::builder::{extract_control, BuilderError, MiqpProblem};
use crate::cw::State;
use crate::qp::Tolerances;

#[derive(Debug, Error, PartialEq)]
pub enum UnitingError {
    #[error("switching thresholds must satisfy c0 < c1, got c0 = {c0}, c1 = {c1}")]
    ThresholdOrder { c0: f64, c1: f64 },
    #[error("{name} must be finite and nonnegative, got {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("low-mode limit {low} exceeds high-mode limit {high} on the limited axis")]
    LimitOrder { low: u64, high: u64 },
    #[error("iteration limit {name} must be at least 1")]
    ZeroLimit { name: &'static str },
    #[error("objective-difference measure at sample {k} has no previous objective")]
    MissingPreviousObjective { k: usize },
    #[error("controller problem certified infeasible at sample {sample}")]
    ControllerInfeasible { sample: usize },
    #[error(transparent)]
    Builder(#[from] BuilderError),
    #[error(transparent)]
    Bnb(#[from] crate::bnb::BnbError),
}

/// Logic mode of the supervisor: which controller configuration is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Low,
    High,
}

impl Mode {
    /// The mode as the conventional logic bit (low = 0, high = 1).
    pub fn bit(self) -> u8 {
        match self {
            Mode::Low => 0,
            Mode::High => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Mode> {
        match bit {
            0 => Some(Mode::Low),
            1 => Some(Mode::High),
            _ => None,
        }
    }
}

/// Plant state extended with the supervisor's logic mode.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub x: State,
    pub q: Mode,
}

/// Which progress measure drives the switching logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapunovKind {
    /// `V = theta * |psi_k - psi_{k-1}| + sigma * |x|^2`: stalls in the
    /// incumbent objective read as progress, spikes as regression. The
    /// difference term is defined as 0 at the first sample.
    Objective,
    /// `V = theta * viol_inf + sigma * |x|^2` with `viol_inf` the worst
    /// constraint violation at the returned iterate; useful when horizons
    /// start out infeasible and the objective is meaningless.
    Feasibility,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovConfig {
    pub kind: LyapunovKind,
    pub theta: f64,
    pub sigma: f64,
    /// Switch high -> low when `V <= c0`.
    pub c0: f64,
    /// Switch low -> high when `V >= c1`.
    pub c1: f64,
}

impl LyapunovConfig {
    pub fn new(
        kind: LyapunovKind,
        theta: f64,
        sigma: f64,
        c0: f64,
        c1: f64,
    ) -> Result<Self, UnitingError> {
        for (name, value) in [("theta", theta), ("sigma", sigma)] {
            if !value.is_finite() || value < 0.0 {
                return Err(UnitingError::InvalidWeight { name, value });
            }
        }
        if !(c0 < c1) {
            return Err(UnitingError::ThresholdOrder { c0, c1 });
        }
        Ok(LyapunovConfig { kind, theta, sigma, c0, c1 })
    }

    /// Objective-difference measure with the rendezvous study's constants.
    pub fn objective_default() -> Self {
        LyapunovConfig {
            kind: LyapunovKind::Objective,
            theta: 1.0,
            sigma: 1e-5,
            c0: 100.0,
            c1: 1000.0,
        }
    }

    /// Feasibility measure with the rendezvous study's constants.
    pub fn feasibility_default() -> Self {
        LyapunovConfig {
            kind: LyapunovKind::Feasibility,
            theta: 1e-3,
            sigma: 1e-5,
            c0: 200.0,
            c1: 300.0,
        }
    }
}

/// A pair of solver effort limits: branch-and-bound node solves and QP
/// iterations per node solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub i_b: u64,
    pub i_qp: usize,
}

/// Which solver axis the low/high modes actually vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitedAxis {
    BranchAndBound,
    QuadraticProgramming,
}

/// Iteration limits per mode. Only the limited axis differs between modes;
/// the other axis is pinned to `base` in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationSchedule {
    pub low: Limits,
    pub high: Limits,
    pub base: Limits,
    pub limited_axis: LimitedAxis,
}

impl IterationSchedule {
    /// Vary the branch-and-bound budget between modes, holding the per-node
    /// QP limit at `base_iqp`.
    pub fn bnb_limited(low_ib: u64, high_ib: u64, base_iqp: usize) -> Result<Self, UnitingError> {
        let s = IterationSchedule {
            low: Limits { i_b: low_ib, i_qp: base_iqp },
            high: Limits { i_b: high_ib, i_qp: base_iqp },
            base: Limits { i_b: high_ib, i_qp: base_iqp },
            limited_axis: LimitedAxis::BranchAndBound,
        };
        s.validate()?;
        Ok(s)
    }

    /// Vary the per-node QP iteration limit between modes, holding the
    /// branch-and-bound budget at `base_ib`.
    pub fn qp_limited(low_iqp: usize, high_iqp: usize, base_ib: u64) -> Result<Self, UnitingError> {
        let s = IterationSchedule {
            low: Limits { i_b: base_ib, i_qp: low_iqp },
            high: Limits { i_b: base_ib, i_qp: high_iqp },
            base: Limits { i_b: base_ib, i_qp: high_iqp },
            limited_axis: LimitedAxis::QuadraticProgramming,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), UnitingError> {
        let (low, high, base_name, base_ok) = match self.limited_axis {
            LimitedAxis::BranchAndBound => {
                (self.low.i_b, self.high.i_b, "i_qp", self.base.i_qp >= 1)
            }
            LimitedAxis::QuadraticProgramming => {
                (self.low.i_qp as u64, self.high.i_qp as u64, "i_b", self.base.i_b >= 1)
            }
        };
        if low == 0 {
            return Err(UnitingError::ZeroLimit { name: "low-mode limit" });
        }
        if !base_ok {
            return Err(UnitingError::ZeroLimit { name: base_name });
        }
        if low > high {
            return Err(UnitingError::LimitOrder { low, high });
        }
        Ok(())
    }

    /// Effective limits in mode `q`: the limited axis takes the mode's
    /// value, the other axis the base value.
    pub fn effective(&self, q: Mode) -> Limits {
        let sel = match q {
            Mode::Low => self.low,
            Mode::High => self.high,
        };
        match self.limited_axis {
            LimitedAxis::BranchAndBound => Limits { i_b: sel.i_b, i_qp: self.base.i_qp },
            LimitedAxis::QuadraticProgramming => Limits { i_b: self.base.i_b, i_qp: sel.i_qp },
        }
    }
}

/// Everything one controller solve contributes to the progress measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveRecord {
    /// Sample index; at `k = 0` the objective-difference term is 0.
    pub k: usize,
    /// Incumbent objective of the solve.
    pub psi: f64,
    /// Incumbent objective of the previous sample's solve, if any.
    pub prev_psi: Option<f64>,
    /// Worst constraint violation at the returned iterate.
    pub viol_inf: f64,
}

/// Evaluate the progress measure at state `x` for the given solve.
pub fn eval_lyapunov(
    cfg: &LyapunovConfig,
    x: &State,
    record: &SolveRecord,
) -> Result<f64, UnitingError> {
    let drive = match cfg.kind {
        LyapunovKind::Objective => {
            if record.k == 0 {
                0.0
            } else {
                let prev = record
                    .prev_psi
                    .ok_or(UnitingError::MissingPreviousObjective { k: record.k })?;
                (record.psi - prev).abs()
            }
        }
        LyapunovKind::Feasibility => record.viol_inf,
    };
    Ok(cfg.theta * drive + cfg.sigma * x.norm_squared())
}

/// One step of the switching automaton. Returns the next mode, the limits
/// to use in that mode, and whether a switch fired. `V` values strictly
/// inside the band `(c0, c1)` leave the mode unchanged (this includes NaN,
/// which compares false on both sides).
pub fn supervisor_step(
    q: Mode,
    v: f64,
    cfg: &LyapunovConfig,
    sched: &IterationSchedule,
) -> (Mode, Limits, bool) {
    let q_next = match q {
        Mode::Low if v >= cfg.c1 => Mode::High,
        Mode::High if v <= cfg.c0 => Mode::Low,
        _ => q,
    };
    (q_next, sched.effective(q_next), q_next != q)
}

/// Everything one supervised controller step produces, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Applied control (first predicted stage through the extractor).
    pub u: DVector<f64>,
    /// Mode the solve ran under.
    pub q_used: Mode,
    /// Mode committed for the next sample.
    pub q_next: Mode,
    pub switched: bool,
    /// Progress measure evaluated at this sample.
    pub v: f64,
    pub psi: f64,
    pub viol_inf: f64,
    /// Limits the solve ran under.
    pub limits: Limits,
    pub result: MiqpResult,
}

/// Closed-loop supervisor: owns the logic mode and the warm-start history
/// and drives one controller solve per plant sample.
#[derive(Debug, Clone)]
pub struct Supervisor {
    cfg: LyapunovConfig,
    sched: IterationSchedule,
    q: Mode,
    prev_psi: Option<f64>,
    prev_y: Option<DVector<f64>>,
    k: usize,
}

impl Supervisor {
    /// A fresh supervisor starting in the high-effort mode.
    pub fn new(cfg: LyapunovConfig, sched: IterationSchedule) -> Result<Self, UnitingError> {
        LyapunovConfig::new(cfg.kind, cfg.theta, cfg.sigma, cfg.c0, cfg.c1)?;
        sched.validate()?;
        Ok(Supervisor { cfg, sched, q: Mode::High, prev_psi: None, prev_y: None, k: 0 })
    }

    pub fn mode(&self) -> Mode {
        self.q
    }

    pub fn sample(&self) -> usize {
        self.k
    }

    /// One supervised sample: re-point the problem at the measured state,
    /// shift last sample's solution into a warm start, solve under the
    /// incoming mode's limits, then evaluate `V` and commit the next mode.
    pub fn step(
        &mut self,
        problem: &mut MiqpProblem,
        x: &State,
        rule: BranchRule,
        node_tol: Tolerances,
    ) -> Result<StepRecord, UnitingError> {
        problem.set_state(x)?;
        let warm = match &self.prev_y {
            Some(y) => {
                let shifted = problem.shift_solution(y)?;
                Some(Incumbent::evaluate(problem, &shifted, 0))
            }
            None => None,
        };
        let limits = self.sched.effective(self.q);
        let result =
            solve_miqp_opts(problem, limits.i_b, limits.i_qp, rule, warm.as_ref(), node_tol)?;
        if result.status == MiqpStatus::Infeasible {
            return Err(UnitingError::ControllerInfeasible { sample: self.k });
        }
        let u = extract_control(&result.y, &problem.extractor, problem.example)?;
        let record = SolveRecord {
            k: self.k,
            psi: result.psi,
            prev_psi: self.prev_psi,
            viol_inf: problem.qp.violation_inf(&result.y),
        };
        let v = eval_lyapunov(&self.cfg, x, &record)?;
        let (q_next, _, switched) = supervisor_step(self.q, v, &self.cfg, &self.sched);
        self.prev_psi = Some(result.psi);
        self.prev_y = Some(result.y.clone());
        self.k += 1;
        let q_used = self.q;
        self.q = q_next;
        Ok(StepRecord {
            u,
            q_used,
            q_next,
            switched,
            v,
            psi: record.psi,
            viol_inf: record.viol_inf,
            limits,
            result,
        })
    }
}

//! Horizon-stacked MIQP construction for the two rendezvous studies.
//!
//! Both builders produce a problem over the decision vector
//!
//! ```text
//! switching thrusters:  y = [zeta (6N) | v1 (3N) | v2 (3N) | z (N)]
//! minimum thrust:       y = [zeta (6N) | v (3N) | v+ (3N) | v- (3N) | step binaries (7N)]
//! ```
//!
//! where `zeta` stacks the predicted states x_0..x_{N-1}; the terminal state
//! x_N is not a variable but an affine image `A zeta_{N-1} + B u_{N-1}` used
//! by the terminal rows. The first state is tied to the measured state by
//! dedicated equality rows (`param_rows`), so re-pointing the problem at a
//! new measurement is a right-hand-side edit, and an unconverged iterate can
//! violate the tie — which the feasibility-based supervisor must observe.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cw::{self, CwParams, State};
use crate::qp::{QpError, QpProblem};

#[derive(Debug, Error, PartialEq)]
pub enum BuilderError {
    #[error("horizon must be at least 1, got {n}")]
    HorizonTooShort { n: usize },
    #[error("empty box: {what}")]
    InfeasibleBox { what: String },
    #[error("state vector contains a non-finite entry")]
    NonFiniteState,
    #[error("big-M value must be positive, got {value}")]
    InvalidBigM { value: f64 },
    #[error("thrust limits must satisfy 0 < v_min < v_max, got [{v_min}, {v_max}]")]
    InvalidThrustLimits { v_min: f64, v_max: f64 },
    #[error("layout mismatch: {what}")]
    LayoutMismatch { what: String },
    #[error("parse error at line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error(transparent)]
    Cw(#[from] cw::CwError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockName {
    /// Stacked predicted states.
    State,
    /// Example 1 impulsive (chemical) thruster inputs.
    ChemicalThrust,
    /// Example 1 continuous (electric) thruster inputs.
    ElectricThrust,
    /// Example 1 per-step thruster-selection binaries.
    ThrusterSelect,
    /// Example 2 net thrust.
    Thrust,
    /// Example 2 positive split variables.
    ThrustPlus,
    /// Example 2 negative split variables.
    ThrustMinus,
    /// Example 2 per-step binary group: 3 plus-signs, 3 minus-signs, 1 gate.
    StepBinaries,
    /// Single-block layout for hand-built problems.
    Flat,
}

/// One contiguous block of `steps` groups of `per_step` variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: BlockName,
    pub start: usize,
    pub per_step: usize,
    pub steps: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.per_step * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index range of step `k` within the full decision vector.
    pub fn step_range(&self, k: usize) -> Range<usize> {
        let s = self.start + k * self.per_step;
        s..s + self.per_step
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn block(&self, name: BlockName) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn flat(n: usize) -> Layout {
        Layout { n, blocks: vec![Block { name: BlockName::Flat, start: 0, per_step: n, steps: 1 }] }
    }
}

/// The map kappa from a decision vector to the applied control: one index
/// range per control channel, concatenated in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlExtractor {
    pub ranges: Vec<Range<usize>>,
    pub control_dim: usize,
}

/// One-step discrete dynamics `x+ = A x + sum_i B_i u_i` with each input
/// matrix tied to the layout block its control lives in. Lets the horizon
/// shift propagate the final state stage instead of freezing it, so a
/// shifted feasible solution stays feasible on every non-terminal row.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePropagator {
    pub a: nalgebra::SMatrix<f64, 6, 6>,
    pub inputs: Vec<(BlockName, nalgebra::SMatrix<f64, 6, 3>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleKind {
    SwitchingThrusters,
    MinThrust,
    Generic,
}

/// A mixed-integer QP over the horizon: the relaxation `qp` (binary bounds
/// already relaxed to [0, 1]) plus the binary index set and layout metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MiqpProblem {
    pub qp: QpProblem,
    /// Strictly increasing; branching pins these lowest index first, so the
    /// layout must place earlier-step binaries at lower indices.
    pub binary_indices: Vec<usize>,
    pub layout: Layout,
    pub extractor: ControlExtractor,
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    /// Rows of `qp.eq_rows` that pin the first predicted state to the
    /// measured state; `set_state` rewrites their right-hand side.
    pub param_rows: Range<usize>,
    pub example: ExampleKind,
    /// One-step dynamics used by `shift_solution` to extend the state block;
    /// `None` for problems without a state/control structure.
    pub propagator: Option<StagePropagator>,
}

impl MiqpProblem {
    /// Wrap a hand-built QP as a single-block MIQP (used by tests and the
    /// generic text format). Binary bounds are clamped into [0, 1].
    pub fn from_parts(mut qp: QpProblem, binary_indices: Vec<usize>) -> Result<Self, BuilderError> {
        let n = qp.n();
        let mut prev: Option<usize> = None;
        for &j in &binary_indices {
            if j >= n {
                return Err(BuilderError::LayoutMismatch {
                    what: format!("binary index {j} out of range for n = {n}"),
                });
            }
            if prev.is_some_and(|p| p >= j) {
                return Err(BuilderError::LayoutMismatch {
                    what: format!("binary indices not strictly increasing at {j}"),
                });
            }
            prev = Some(j);
            let (lo, hi) = qp.bounds[j];
            let (lo, hi) = (lo.max(0.0), hi.min(1.0));
            if lo > hi {
                return Err(BuilderError::InfeasibleBox {
                    what: format!("binary {j} bounds clamp to empty [{lo}, {hi}]"),
                });
            }
            qp.bounds[j] = (lo, hi);
        }
        Ok(MiqpProblem {
            layout: Layout::flat(n),
            extractor: ControlExtractor { ranges: Vec::new(), control_dim: 0 },
            horizon: 1,
            state_dim: 0,
            control_dim: 0,
            param_rows: 0..0,
            example: ExampleKind::Generic,
            propagator: None,
            qp,
            binary_indices,
        })
    }

    /// Point the problem at a new measured state by rewriting the parameter
    /// rows' right-hand side.
    pub fn set_state(&mut self, x: &State) -> Result<(), BuilderError> {
        if self.param_rows.len() != 6 {
            return Err(BuilderError::LayoutMismatch {
                what: format!("problem has {} parameter rows, expected 6", self.param_rows.len()),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(BuilderError::NonFiniteState);
        }
        for (i, row) in self.param_rows.clone().enumerate() {
            self.qp.eq_rhs[row] = x[i];
        }
        Ok(())
    }

    /// Shift a horizon solution one step forward per block, holding the last
    /// step (the standard receding-horizon warm start). When the problem has
    /// a propagator, the final state stage is extended through the dynamics
    /// under the held controls instead of frozen, so a feasible solution
    /// shifts into a point violating at most the terminal rows.
    pub fn shift_solution(&self, y: &DVector<f64>) -> Result<DVector<f64>, BuilderError> {
        if y.len() != self.layout.n {
            return Err(BuilderError::LayoutMismatch {
                what: format!("vector has {} entries for layout n = {}", y.len(), self.layout.n),
            });
        }
        let mut out = y.clone();
        for b in &self.layout.blocks {
            for k in 0..b.steps.saturating_sub(1) {
                let src = b.step_range(k + 1);
                let dst = b.step_range(k);
                for (d, s) in dst.zip(src) {
                    out[d] = y[s];
                }
            }
        }
        if let (Some(prop), Some(sb)) = (&self.propagator, self.layout.block(BlockName::State)) {
            let last = sb.step_range(sb.steps - 1);
            let x_old = State::from_iterator(last.clone().map(|i| y[i]));
            let mut x_new = prop.a * x_old;
            for (name, b_mat) in &prop.inputs {
                let cb = self.layout.block(*name).ok_or_else(|| BuilderError::LayoutMismatch {
                    what: format!("propagator input block {name:?} missing from layout"),
                })?;
                let ur = cb.step_range(cb.steps - 1);
                let u = nalgebra::SVector::<f64, 3>::from_iterator(ur.map(|i| y[i]));
                x_new += b_mat * u;
            }
            for (slot, val) in last.zip(x_new.iter()) {
                out[slot] = *val;
            }
        }
        Ok(out)
    }
}

pub fn extract_control(
    y: &DVector<f64>,
    kappa: &ControlExtractor,
    example: ExampleKind,
) -> Result<DVector<f64>, BuilderError> {
    let total: usize = kappa.ranges.iter().map(|r| r.len()).sum();
    let expected = match example {
        ExampleKind::SwitchingThrusters => 2 * kappa.control_dim,
        ExampleKind::MinThrust => kappa.control_dim,
        ExampleKind::Generic => total,
    };
    if total != expected {
        return Err(BuilderError::LayoutMismatch {
            what: format!("extractor yields {total} entries, expected {expected}"),
        });
    }
    let mut u = DVector::zeros(total);
    let mut at = 0;
    for r in &kappa.ranges {
        if r.end > y.len() {
            return Err(BuilderError::LayoutMismatch {
                what: format!("extractor range {}..{} exceeds vector length {}", r.start, r.end, y.len()),
            });
        }
        for j in r.clone() {
            u[at] = y[j];
            at += 1;
        }
    }
    Ok(u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchingWeights {
    pub alpha_v1: f64,
    pub alpha_v2: f64,
    pub alpha_state: f64,
}

impl Default for SwitchingWeights {
    fn default() -> Self {
        SwitchingWeights { alpha_v1: 1.0, alpha_v2: 0.1, alpha_state: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchingBoxes {
    /// Half-width of the position box on predicted states, km.
    pub pos_box: f64,
    /// Half-width of the velocity box on predicted states, km/s.
    pub vel_box: f64,
    /// Half-width of the per-axis thrust box, km/s equivalent.
    pub thrust_box: f64,
}

impl Default for SwitchingBoxes {
    fn default() -> Self {
        SwitchingBoxes { pos_box: 8000.0, vel_box: 1.0, thrust_box: 0.1 }
    }
}

/// Example 1: rendezvous with one impulsive and one continuous thruster that
/// can never fire in the same step. Per step, `z_k = 1` grants the impulsive
/// channel its big-M budget and zeroes the continuous one, `z_k = 0` does the
/// opposite. Terminal rows drive the state after step N-1 to the origin.
pub fn build_switching_thrusters(
    cw: &CwParams,
    x_k: &State,
    horizon: usize,
    weights: &SwitchingWeights,
    big_m: f64,
    boxes: &SwitchingBoxes,
) -> Result<MiqpProblem, BuilderError> {
    if horizon < 1 {
        return Err(BuilderError::HorizonTooShort { n: horizon });
    }
    if !x_k.iter().all(|v| v.is_finite()) {
        return Err(BuilderError::NonFiniteState);
    }
    if !(big_m > 0.0) {
        return Err(BuilderError::InvalidBigM { value: big_m });
    }
    for (name, v) in [("position box", boxes.pos_box), ("velocity box", boxes.vel_box), ("thrust box", boxes.thrust_box)]
    {
        if !(v > 0.0) {
            return Err(BuilderError::InfeasibleBox { what: format!("{name} half-width {v}") });
        }
    }
    let nsteps = horizon;
    let a_mat = cw::stm(cw, cw.dt);
    let b1 = cw::b_impulsive(cw);
    let b2 = cw::b_electric(cw, cw::DEFAULT_QUADRATURE_STEPS)?;

    let zeta = Block { name: BlockName::State, start: 0, per_step: 6, steps: nsteps };
    let v1 = Block { name: BlockName::ChemicalThrust, start: 6 * nsteps, per_step: 3, steps: nsteps };
    let v2 = Block { name: BlockName::ElectricThrust, start: 9 * nsteps, per_step: 3, steps: nsteps };
    let z = Block { name: BlockName::ThrusterSelect, start: 12 * nsteps, per_step: 1, steps: nsteps };
    let n = 13 * nsteps;

    // Hessian: quadratic thrust surrogates plus a small state pull-in on the
    // free states (the pinned first state is a constant, so weighting it
    // would only shift the objective by a state-dependent amount).
    let mut q = DMatrix::zeros(n, n);
    for k in 1..nsteps {
        for j in zeta.step_range(k) {
            q[(j, j)] = 2.0 * weights.alpha_state;
        }
    }
    for j in v1.start..v1.start + v1.len() {
        q[(j, j)] = 2.0 * weights.alpha_v1;
    }
    for j in v2.start..v2.start + v2.len() {
        q[(j, j)] = 2.0 * weights.alpha_v2;
    }

    // Equalities: 6 parameter rows, 6(N-1) dynamics rows, 6 terminal rows.
    let p_rows = 6 * nsteps + 6;
    let mut e_mat = DMatrix::zeros(p_rows, n);
    let mut e_rhs = DVector::zeros(p_rows);
    for i in 0..6 {
        e_mat[(i, zeta.start + i)] = 1.0;
        e_rhs[i] = x_k[i];
    }
    for k in 0..nsteps {
        // Row block for x_{k+1} - A x_k - B1 v1_k - B2 v2_k = 0; for the last
        // step x_N is the origin, so the identity block is simply absent.
        let r0 = 6 + 6 * k;
        for i in 0..6 {
            if k + 1 < nsteps {
                e_mat[(r0 + i, zeta.step_range(k + 1).start + i)] = 1.0;
            }
            for j in 0..6 {
                e_mat[(r0 + i, zeta.step_range(k).start + j)] = -a_mat[(i, j)];
            }
            for j in 0..3 {
                e_mat[(r0 + i, v1.step_range(k).start + j)] = -b1[(i, j)];
                e_mat[(r0 + i, v2.step_range(k).start + j)] = -b2[(i, j)];
            }
        }
    }

    // Inequalities: 12 big-M gating rows per step.
    let m_rows = 12 * nsteps;
    let mut c_mat = DMatrix::zeros(m_rows, n);
    let mut c_rhs = DVector::zeros(m_rows);
    for k in 0..nsteps {
        let r0 = 12 * k;
        let zk = z.step_range(k).start;
        for i in 0..3 {
            let v1i = v1.step_range(k).start + i;
            let v2i = v2.step_range(k).start + i;
            // +-v1 <= M z  (impulsive fires only when selected)
            c_mat[(r0 + i, v1i)] = 1.0;
            c_mat[(r0 + i, zk)] = -big_m;
            c_mat[(r0 + 3 + i, v1i)] = -1.0;
            c_mat[(r0 + 3 + i, zk)] = -big_m;
            // +-v2 <= M (1 - z)  (continuous fires only when deselected)
            c_mat[(r0 + 6 + i, v2i)] = 1.0;
            c_mat[(r0 + 6 + i, zk)] = big_m;
            c_rhs[r0 + 6 + i] = big_m;
            c_mat[(r0 + 9 + i, v2i)] = -1.0;
            c_mat[(r0 + 9 + i, zk)] = big_m;
            c_rhs[r0 + 9 + i] = big_m;
        }
    }

    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); n];
    for k in 1..nsteps {
        let r = zeta.step_range(k);
        for (i, j) in r.enumerate() {
            let hw = if i < 3 { boxes.pos_box } else { boxes.vel_box };
            bounds[j] = (-hw, hw);
        }
    }
    for j in v1.start..v2.start + v2.len() {
        bounds[j] = (-boxes.thrust_box, boxes.thrust_box);
    }
    for j in z.start..z.start + z.len() {
        bounds[j] = (0.0, 1.0);
    }

    let qp = QpProblem::new(q, DVector::zeros(n), c_mat, c_rhs, e_mat, e_rhs, bounds)?;
    let binary_indices: Vec<usize> = (z.start..z.start + z.len()).collect();
    let extractor = ControlExtractor {
        ranges: vec![v1.step_range(0), v2.step_range(0)],
        control_dim: 3,
    };
    Ok(MiqpProblem {
        qp,
        binary_indices,
        layout: Layout { n, blocks: vec![zeta, v1, v2, z] },
        extractor,
        horizon: nsteps,
        state_dim: 6,
        control_dim: 3,
        param_rows: 0..6,
        example: ExampleKind::SwitchingThrusters,
        propagator: Some(StagePropagator {
            a: a_mat,
            inputs: vec![(BlockName::ChemicalThrust, b1), (BlockName::ElectricThrust, b2)],
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinThrustWeights {
    pub state_weight: f64,
    pub thrust_weight: f64,
}

impl Default for MinThrustWeights {
    fn default() -> Self {
        MinThrustWeights { state_weight: 1e-7, thrust_weight: 1e2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrustLimits {
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for ThrustLimits {
    fn default() -> Self {
        ThrustLimits { v_min: 1e-4, v_max: 5e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalBox {
    pub pos_halfwidth: f64,
    pub vel_halfwidth: f64,
}

impl Default for TerminalBox {
    fn default() -> Self {
        TerminalBox { pos_halfwidth: 0.1, vel_halfwidth: 1e-3 }
    }
}

impl TerminalBox {
    pub fn halfwidths(&self) -> [f64; 6] {
        let p = self.pos_halfwidth;
        let v = self.vel_halfwidth;
        [p, p, p, v, v, v]
    }

    /// Whether a state lies inside the box.
    pub fn contains(&self, x: &State) -> bool {
        let hw = self.halfwidths();
        (0..6).all(|i| x[i].abs() <= hw[i])
    }
}

/// Example 2: minimum-thrust rendezvous with a dead-band. The l1 magnitude
/// of each step's thrust is linearized through nonnegative split variables
/// `v = v+ - v-` with per-component sign binaries, and a per-step gate binary
/// `z_k` enforces thrust either zero or with l1 norm in [v_min, v_max].
pub fn build_min_thrust(
    cw: &CwParams,
    x_k: &State,
    horizon: usize,
    weights: &MinThrustWeights,
    thrust: &ThrustLimits,
    terminal: &TerminalBox,
) -> Result<MiqpProblem, BuilderError> {
    if horizon < 1 {
        return Err(BuilderError::HorizonTooShort { n: horizon });
    }
    if !x_k.iter().all(|v| v.is_finite()) {
        return Err(BuilderError::NonFiniteState);
    }
    if !(0.0 < thrust.v_min && thrust.v_min < thrust.v_max) {
        return Err(BuilderError::InvalidThrustLimits { v_min: thrust.v_min, v_max: thrust.v_max });
    }
    if !(terminal.pos_halfwidth > 0.0 && terminal.vel_halfwidth > 0.0) {
        return Err(BuilderError::InfeasibleBox {
            what: format!(
                "terminal half-widths {} km / {} km/s",
                terminal.pos_halfwidth, terminal.vel_halfwidth
            ),
        });
    }
    let nsteps = horizon;
    let a_mat = cw::stm(cw, cw.dt);
    let b2 = cw::b_electric(cw, cw::DEFAULT_QUADRATURE_STEPS)?;

    let zeta = Block { name: BlockName::State, start: 0, per_step: 6, steps: nsteps };
    let v = Block { name: BlockName::Thrust, start: 6 * nsteps, per_step: 3, steps: nsteps };
    let vp = Block { name: BlockName::ThrustPlus, start: 9 * nsteps, per_step: 3, steps: nsteps };
    let vm = Block { name: BlockName::ThrustMinus, start: 12 * nsteps, per_step: 3, steps: nsteps };
    let bins = Block { name: BlockName::StepBinaries, start: 15 * nsteps, per_step: 7, steps: nsteps };
    let n = 22 * nsteps;

    let mut q = DMatrix::zeros(n, n);
    for k in 1..nsteps {
        for j in zeta.step_range(k) {
            q[(j, j)] = 2.0 * weights.state_weight;
        }
    }
    for j in v.start..v.start + v.len() {
        q[(j, j)] = 2.0 * weights.thrust_weight;
    }

    // Equalities: parameter, dynamics, and the split identity v = v+ - v-.
    let p_rows = 6 + 6 * (nsteps - 1) + 3 * nsteps;
    let mut e_mat = DMatrix::zeros(p_rows, n);
    let mut e_rhs = DVector::zeros(p_rows);
    for i in 0..6 {
        e_mat[(i, zeta.start + i)] = 1.0;
        e_rhs[i] = x_k[i];
    }
    for k in 0..nsteps - 1 {
        let r0 = 6 + 6 * k;
        for i in 0..6 {
            e_mat[(r0 + i, zeta.step_range(k + 1).start + i)] = 1.0;
            for j in 0..6 {
                e_mat[(r0 + i, zeta.step_range(k).start + j)] = -a_mat[(i, j)];
            }
            for j in 0..3 {
                e_mat[(r0 + i, v.step_range(k).start + j)] = -b2[(i, j)];
            }
        }
    }
    let split0 = 6 + 6 * (nsteps - 1);
    for k in 0..nsteps {
        for i in 0..3 {
            let r = split0 + 3 * k + i;
            e_mat[(r, v.step_range(k).start + i)] = 1.0;
            e_mat[(r, vp.step_range(k).start + i)] = -1.0;
            e_mat[(r, vm.step_range(k).start + i)] = 1.0;
        }
    }

    // Inequalities: 11 rows per step plus 12 terminal-box rows.
    let m_rows = 11 * nsteps + 12;
    let mut c_mat = DMatrix::zeros(m_rows, n);
    let mut c_rhs = DVector::zeros(m_rows);
    for k in 0..nsteps {
        let r0 = 11 * k;
        let g = bins.step_range(k).start;
        let zk = g + 6;
        for i in 0..3 {
            // v+ <= v_max s+, v- <= v_max s-
            c_mat[(r0 + i, vp.step_range(k).start + i)] = 1.0;
            c_mat[(r0 + i, g + i)] = -thrust.v_max;
            c_mat[(r0 + 3 + i, vm.step_range(k).start + i)] = 1.0;
            c_mat[(r0 + 3 + i, g + 3 + i)] = -thrust.v_max;
            // s+ + s- <= z_k: at most one sign per axis, and only when the
            // step gate is open (implies the plain s+ + s- <= 1).
            c_mat[(r0 + 6 + i, g + i)] = 1.0;
            c_mat[(r0 + 6 + i, g + 3 + i)] = 1.0;
            c_mat[(r0 + 6 + i, zk)] = -1.0;
        }
        // v_min z_k <= sum_i (v+ + v-) <= v_max z_k
        for i in 0..3 {
            c_mat[(r0 + 9, vp.step_range(k).start + i)] = -1.0;
            c_mat[(r0 + 9, vm.step_range(k).start + i)] = -1.0;
            c_mat[(r0 + 10, vp.step_range(k).start + i)] = 1.0;
            c_mat[(r0 + 10, vm.step_range(k).start + i)] = 1.0;
        }
        c_mat[(r0 + 9, zk)] = thrust.v_min;
        c_mat[(r0 + 10, zk)] = -thrust.v_max;
    }
    // Terminal box on x_N = A zeta_{N-1} + B2 v_{N-1}.
    let t0 = 11 * nsteps;
    let hw = terminal.halfwidths();
    for i in 0..6 {
        for j in 0..6 {
            let col = zeta.step_range(nsteps - 1).start + j;
            c_mat[(t0 + i, col)] = a_mat[(i, j)];
            c_mat[(t0 + 6 + i, col)] = -a_mat[(i, j)];
        }
        for j in 0..3 {
            let col = v.step_range(nsteps - 1).start + j;
            c_mat[(t0 + i, col)] = b2[(i, j)];
            c_mat[(t0 + 6 + i, col)] = -b2[(i, j)];
        }
        c_rhs[t0 + i] = hw[i];
        c_rhs[t0 + 6 + i] = hw[i];
    }

    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); n];
    for j in v.start..v.start + v.len() {
        bounds[j] = (-thrust.v_max, thrust.v_max);
    }
    for j in vp.start..vm.start + vm.len() {
        bounds[j] = (0.0, thrust.v_max);
    }
    for j in bins.start..bins.start + bins.len() {
        bounds[j] = (0.0, 1.0);
    }

    let qp = QpProblem::new(q, DVector::zeros(n), c_mat, c_rhs, e_mat, e_rhs, bounds)?;
    let binary_indices: Vec<usize> = (bins.start..bins.start + bins.len()).collect();
    let extractor = ControlExtractor { ranges: vec![v.step_range(0)], control_dim: 3 };
    Ok(MiqpProblem {
        qp,
        binary_indices,
        layout: Layout { n, blocks: vec![zeta, v, vp, vm, bins] },
        extractor,
        horizon: nsteps,
        state_dim: 6,
        control_dim: 3,
        param_rows: 0..6,
        example: ExampleKind::MinThrust,
        propagator: Some(StagePropagator { a: a_mat, inputs: vec![(BlockName::Thrust, b2)] }),
    })
}

fn push_row(out: &mut String, row: impl Iterator<Item = f64>) {
    let mut first = true;
    for v in row {
        if !first {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
        first = false;
    }
    out.push('\n');
}

/// Serialize the matrix core of a problem to a line-oriented text format:
/// a `n m p s` header, dense `Q`, `c`, `C`, `b`, `E`, `e` rows, per-variable
/// bounds, binary indices, and the objective offset. Layout metadata is not
/// serialized; parsing yields a single-block problem.
pub fn write_problem_text(p: &MiqpProblem) -> String {
    let qp = &p.qp;
    let (n, m, pr) = (qp.n(), qp.m(), qp.p());
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {} {}", n, m, pr, p.binary_indices.len());
    for i in 0..n {
        push_row(&mut out, (0..n).map(|j| qp.hessian[(i, j)]));
    }
    push_row(&mut out, qp.linear_cost.iter().copied());
    for i in 0..m {
        push_row(&mut out, (0..n).map(|j| qp.ineq_rows[(i, j)]));
    }
    push_row(&mut out, qp.ineq_rhs.iter().copied());
    for i in 0..pr {
        push_row(&mut out, (0..n).map(|j| qp.eq_rows[(i, j)]));
    }
    push_row(&mut out, qp.eq_rhs.iter().copied());
    for &(lo, hi) in &qp.bounds {
        let _ = writeln!(out, "{lo} {hi}");
    }
    let mut first = true;
    for &j in &p.binary_indices {
        if !first {
            out.push(' ');
        }
        let _ = write!(out, "{j}");
        first = false;
    }
    out.push('\n');
    let _ = writeln!(out, "{}", qp.objective_offset);
    out
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str), BuilderError> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| BuilderError::Parse { line: 0, what: format!("missing {what}") })
    }

    fn floats(&mut self, want: usize, what: &str) -> Result<Vec<f64>, BuilderError> {
        let (line, s) = self.next_line(what)?;
        let vals: Result<Vec<f64>, _> = s.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| BuilderError::Parse { line, what: format!("{what}: {e}") })?;
        if vals.len() != want {
            return Err(BuilderError::Parse {
                line,
                what: format!("{what}: expected {want} values, got {}", vals.len()),
            });
        }
        Ok(vals)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, BuilderError> {
        let mut mat = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let vals = self.floats(cols, what)?;
            for j in 0..cols {
                mat[(i, j)] = vals[j];
            }
        }
        Ok(mat)
    }
}

pub fn parse_problem_text(text: &str) -> Result<MiqpProblem, BuilderError> {
    let mut rd = LineReader { lines: text.lines().enumerate() };
    let dims = rd.floats(4, "header")?;
    if dims.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(BuilderError::Parse { line: 1, what: "header entries must be nonnegative integers".into() });
    }
    let [n, m, p, s] = [dims[0], dims[1], dims[2], dims[3]].map(|v| v as usize);

    let q = rd.matrix(n, n, "hessian row")?;
    let c = DVector::from_vec(rd.floats(n, "linear cost")?);
    let c_mat = rd.matrix(m, n, "inequality row")?;
    let b = DVector::from_vec(rd.floats(m, "inequality rhs")?);
    let e_mat = rd.matrix(p, n, "equality row")?;
    let e = DVector::from_vec(rd.floats(p, "equality rhs")?);
    let mut bounds = Vec::with_capacity(n);
    for _ in 0..n {
        let vals = rd.floats(2, "bounds")?;
        bounds.push((vals[0], vals[1]));
    }
    let (ln, line) = rd.next_line("binary indices")?;
    let idx: Result<Vec<usize>, _> = line.split_whitespace().map(str::parse::<usize>).collect();
    let idx = idx.map_err(|e| BuilderError::Parse { line: ln, what: format!("binary indices: {e}") })?;
    if idx.len() != s {
        return Err(BuilderError::Parse {
            line: ln,
            what: format!("expected {s} binary indices, got {}", idx.len()),
        });
    }
    let offset = rd.floats(1, "objective offset")?[0];

    let mut qp = QpProblem::new(q, c, c_mat, b, e_mat, e, bounds)?;
    qp.objective_offset = offset;
    MiqpProblem::from_parts(qp, idx)
}

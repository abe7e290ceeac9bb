//! Iteration-limited branch-and-bound over the binary variables.
//!
//! The solver runs a fixed budget of node solves: each iteration pops one
//! node, solves its relaxation with the per-node QP iteration limit, applies
//! the prune rule, and (if the node survives and has an unpinned binary)
//! branches on the lowest-index unpinned binary, enqueueing the `[0, 0]`
//! child first. When the budget runs out with live nodes remaining, the two
//! oldest unsolved nodes receive final solves whose results only update the
//! incumbent. Exhausting the tree early is the only other way to stop, so
//! `bnb_iterations_used <= i_b + 2` always holds.
//!
//! Prune rules:
//! * `DepthFirst` — a feasible node kills its unsolved sibling, so the
//!   search dives greedily and backtracks only on infeasible nodes. No bound
//!   pruning; optimality is never claimed when a sibling was killed.
//! * `BestFirst` — nodes are explored by parent relaxation objective (ties
//!   by node id) and a node is killed when its candidate value exceeds the
//!   best integral incumbent value, which is exact bound pruning whenever
//!   the node relaxations converge.
//!
//! Every node event is appended to a `tree_log`, the interpretability
//! artifact: the full search is replayable from the log alone. A `branched`
//! entry records the creation of exactly two children; for a budget-cut
//! best-first run, children that were never popped have no entries of their
//! own.

use nalgebra::DVector;
use thiserror::Error;

use crate::builder::MiqpProblem;
use crate::qp::{solve_qp, QpError, QpResult, QpStatus, Tolerances, WarmStart};

/// Binaries are considered integral within this distance of {0, 1}.
pub const INTEGRALITY_TOL: f64 = 1e-6;
/// "Sufficiently large" initial incumbent value.
pub const PSI_SENTINEL: f64 = 1e18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchRule {
    DepthFirst,
    BestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiqpStatus {
    /// Tree exhausted with only converged or certified-infeasible node
    /// solves and no depth-first kills: the incumbent is provably optimal.
    IntegralOptimal,
    /// An integral incumbent exists but the search was cut by a budget,
    /// unconverged node solves, or heuristic sibling kills.
    IntegralFeasible,
    /// No integral incumbent; the best relaxed iterate is returned so the
    /// controller still has something to apply.
    RelaxedOnly,
    /// Every node was certified infeasible and no warm incumbent applied.
    Infeasible,
}

impl MiqpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MiqpStatus::IntegralOptimal => "integral_optimal",
            MiqpStatus::IntegralFeasible => "integral_feasible",
            MiqpStatus::RelaxedOnly => "relaxed_only",
            MiqpStatus::Infeasible => "infeasible",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<MiqpStatus> {
        match s {
            "integral_optimal" => Some(MiqpStatus::IntegralOptimal),
            "integral_feasible" => Some(MiqpStatus::IntegralFeasible),
            "relaxed_only" => Some(MiqpStatus::RelaxedOnly),
            "infeasible" => Some(MiqpStatus::Infeasible),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeAction {
    Solved,
    PrunedInfeasible,
    PrunedBound,
    PrunedDepthFirst,
    Branched,
    FinalSolve,
}

impl TreeAction {
    pub fn as_str(self) -> &'static str {
        match self {
            TreeAction::Solved => "solved",
            TreeAction::PrunedInfeasible => "pruned_infeasible",
            TreeAction::PrunedBound => "pruned_bound",
            TreeAction::PrunedDepthFirst => "pruned_depthfirst",
            TreeAction::Branched => "branched",
            TreeAction::FinalSolve => "final_solve",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeLogEntry {
    pub node_id: usize,
    pub parent_id: Option<usize>,
    pub depth: usize,
    pub action: TreeAction,
    /// Objective associated with the action (NaN when not applicable).
    pub psi: f64,
    /// Primal residual of the node solve (NaN when not applicable).
    pub residual_inf: f64,
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

impl std::fmt::Display for TreeLogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.node_id,
            self.parent_id.map_or(-1, |p| p as i64),
            self.depth,
            self.action.as_str(),
            fmt_opt(self.psi),
            fmt_opt(self.residual_inf),
        )
    }
}

/// Render a tree log in the line-oriented text format
/// `node_id,parent_id,depth,action,psi,residual_inf`.
pub fn format_tree_log(log: &[TreeLogEntry]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

/// One tree node. `pinned` holds `(binary index, interval)` pairs in pin
/// order, each interval being `[0, 0]` or `[1, 1]`; a dead node is never
/// branched or solved again.
#[derive(Debug, Clone, PartialEq)]
pub struct BnbNode {
    pub id: usize,
    pub parent_id: Option<usize>,
    pub pinned: Vec<(usize, (f64, f64))>,
    pub depth: usize,
    pub alive: bool,
    pub relaxed_result: Option<QpResult>,
    /// Exploration key for best-first: parent's relaxation objective.
    pub order_key: f64,
}

impl BnbNode {
    fn root() -> Self {
        BnbNode {
            id: 0,
            parent_id: None,
            pinned: Vec::new(),
            depth: 0,
            alive: true,
            relaxed_result: None,
            order_key: f64::NEG_INFINITY,
        }
    }

    fn is_solved(&self) -> bool {
        self.relaxed_result.is_some()
    }
}

/// Best solution found so far. `psi_best` is the full objective at `y_best`
/// (binaries rounded when `integral`).
#[derive(Debug, Clone, PartialEq)]
pub struct Incumbent {
    pub y_best: DVector<f64>,
    pub psi_best: f64,
    pub integral: bool,
    pub source_node: usize,
}

impl Incumbent {
    /// Evaluate a candidate vector against a problem: binaries within
    /// [`INTEGRALITY_TOL`] of {0, 1} are rounded and the objective is
    /// recomputed at the (possibly rounded) point.
    pub fn evaluate(problem: &MiqpProblem, y: &DVector<f64>, source_node: usize) -> Self {
        let rounded = round_binaries(problem, y);
        match rounded {
            Some(y_best) => {
                let psi_best = problem.qp.objective(&y_best);
                Incumbent { y_best, psi_best, integral: true, source_node }
            }
            None => Incumbent {
                psi_best: problem.qp.objective(y),
                y_best: y.clone(),
                integral: false,
                source_node,
            },
        }
    }
}

/// Rounded copy of `y` if every binary is within tolerance of {0, 1}.
fn round_binaries(problem: &MiqpProblem, y: &DVector<f64>) -> Option<DVector<f64>> {
    let mut out = y.clone();
    for &j in &problem.binary_indices {
        let v = y[j];
        if (v - 0.0).abs() <= INTEGRALITY_TOL {
            out[j] = 0.0;
        } else if (v - 1.0).abs() <= INTEGRALITY_TOL {
            out[j] = 1.0;
        } else {
            return None;
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiqpResult {
    pub y: DVector<f64>,
    pub psi: f64,
    pub status: MiqpStatus,
    pub bnb_iterations_used: u64,
    pub qp_iterations_total: u64,
    pub tree_log: Vec<TreeLogEntry>,
}

#[derive(Debug, Error, PartialEq)]
pub enum BnbError {
    #[error("iteration limit {name} must be at least 1")]
    ZeroLimit { name: &'static str },
    #[error("binary index {index} out of range for n = {n}")]
    BinaryOutOfRange { index: usize, n: usize },
    #[error("binary indices not strictly increasing at {index}")]
    BinaryOrder { index: usize },
    #[error("no unpinned binary left to branch on")]
    NoUnpinnedBinary,
    #[error("warm incumbent has {got} entries, problem has {expected}")]
    WarmStartDimension { got: usize, expected: usize },
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Pin the lowest-index unpinned binary of `node`, pushing the `[0, 0]`
/// child then the `[1, 1]` child onto the tree. Returns the child ids.
pub fn branch(
    problem: &MiqpProblem,
    tree: &mut Vec<BnbNode>,
    node_id: usize,
) -> Result<(usize, usize), BnbError> {
    let branch_var = {
        let node = &tree[node_id];
        problem
            .binary_indices
            .iter()
            .copied()
            .find(|j| !node.pinned.iter().any(|(p, _)| p == j))
            .ok_or(BnbError::NoUnpinnedBinary)?
    };
    let order_key = tree[node_id]
        .relaxed_result
        .as_ref()
        .map_or(f64::NEG_INFINITY, |r| r.objective);
    let make_child = |tree: &mut Vec<BnbNode>, pin: (f64, f64)| {
        let parent = &tree[node_id];
        let mut pinned = parent.pinned.clone();
        pinned.push((branch_var, pin));
        let child = BnbNode {
            id: tree.len(),
            parent_id: Some(node_id),
            depth: pinned.len(),
            pinned,
            alive: true,
            relaxed_result: None,
            order_key,
        };
        let id = child.id;
        tree.push(child);
        id
    };
    let zero = make_child(tree, (0.0, 0.0));
    let one = make_child(tree, (1.0, 1.0));
    Ok((zero, one))
}

/// What [`prune`] did, so the caller can log it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneOutcome {
    /// This node was killed (certified infeasible relaxation).
    pub pruned_infeasible: bool,
    /// This node was killed by the best-first bound test, at this value.
    pub pruned_bound: Option<f64>,
    /// Sibling node killed by the depth-first rule.
    pub killed_sibling: Option<usize>,
    /// The integral incumbent improved.
    pub updated_incumbent: bool,
}

/// Incumbent bookkeeping across one tree search: the best integral solution
/// (whose value is the pruning bound) and the best relaxed fallback.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IncumbentState {
    pub best: Option<Incumbent>,
    pub relaxed: Option<Incumbent>,
}

impl IncumbentState {
    /// Pruning bound: value of the best integral incumbent, else the
    /// sentinel. Relaxed fallbacks never tighten the bound.
    pub fn psi_tilde(&self) -> f64 {
        self.best.as_ref().map_or(PSI_SENTINEL, |i| i.psi_best)
    }

    /// Offer a candidate iterate. Integral candidates tighten the bound iff
    /// strictly better (so the bound is monotone non-increasing); fractional
    /// ones only compete for the relaxed fallback. Returns whether the
    /// integral incumbent improved.
    pub fn offer(&mut self, problem: &MiqpProblem, y: &DVector<f64>, source_node: usize) -> bool {
        let cand = Incumbent::evaluate(problem, y, source_node);
        if cand.integral {
            if cand.psi_best < self.psi_tilde() {
                self.best = Some(cand);
                return true;
            }
        } else if self.relaxed.as_ref().is_none_or(|r| cand.psi_best < r.psi_best) {
            self.relaxed = Some(cand);
        }
        false
    }
}

/// Apply the prune logic to a node with a fresh relaxation result.
pub fn prune(
    problem: &MiqpProblem,
    tree: &mut [BnbNode],
    node_id: usize,
    state: &mut IncumbentState,
    rule: BranchRule,
) -> PruneOutcome {
    let mut out = PruneOutcome {
        pruned_infeasible: false,
        pruned_bound: None,
        killed_sibling: None,
        updated_incumbent: false,
    };
    let result = tree[node_id].relaxed_result.clone().expect("node has a fresh relaxation");
    if result.status == QpStatus::PrimalInfeasible {
        tree[node_id].alive = false;
        out.pruned_infeasible = true;
        return out;
    }
    out.updated_incumbent = state.offer(problem, &result.iterate, node_id);
    match rule {
        BranchRule::DepthFirst => {
            // A feasible node commits the dive: its unsolved sibling dies.
            let parent = tree[node_id].parent_id;
            if parent.is_some() {
                let sibling = tree
                    .iter()
                    .position(|n| n.parent_id == parent && n.id != node_id && n.alive && !n.is_solved());
                if let Some(s) = sibling {
                    tree[s].alive = false;
                    out.killed_sibling = Some(s);
                }
            }
        }
        BranchRule::BestFirst => {
            let candidate = Incumbent::evaluate(problem, &result.iterate, node_id);
            if candidate.psi_best > state.psi_tilde() {
                tree[node_id].alive = false;
                out.pruned_bound = Some(candidate.psi_best);
            }
        }
    }
    out
}

fn node_problem(problem: &MiqpProblem, node: &BnbNode) -> Result<crate::qp::QpProblem, QpError> {
    let mut bounds = problem.qp.bounds.clone();
    for &(j, (lo, hi)) in &node.pinned {
        let (blo, bhi) = bounds[j];
        bounds[j] = (blo.max(lo), bhi.min(hi));
    }
    problem.qp.with_bounds(bounds)
}

fn pop_next(tree: &[BnbNode], rule: BranchRule) -> Option<usize> {
    match rule {
        // FIFO on creation order; with sibling kills this dives depth-first.
        BranchRule::DepthFirst => tree.iter().find(|n| n.alive && !n.is_solved()).map(|n| n.id),
        BranchRule::BestFirst => tree
            .iter()
            .filter(|n| n.alive && !n.is_solved())
            .min_by(|a, b| {
                a.order_key
                    .partial_cmp(&b.order_key)
                    .expect("objectives are never NaN")
                    .then(a.id.cmp(&b.id))
            })
            .map(|n| n.id),
    }
}

fn validate(problem: &MiqpProblem, i_b: u64, i_qp: usize) -> Result<(), BnbError> {
    if i_b < 1 {
        return Err(BnbError::ZeroLimit { name: "i_b" });
    }
    if i_qp < 1 {
        return Err(BnbError::ZeroLimit { name: "i_qp" });
    }
    let n = problem.qp.n();
    let mut prev: Option<usize> = None;
    for &j in &problem.binary_indices {
        if j >= n {
            return Err(BnbError::BinaryOutOfRange { index: j, n });
        }
        if prev.is_some_and(|p| p >= j) {
            return Err(BnbError::BinaryOrder { index: j });
        }
        prev = Some(j);
    }
    Ok(())
}

/// Solve the MIQP with a node budget of `i_b` QP solves (plus up to two
/// final solves) and at most `i_qp` Newton iterations per node, at the
/// default 1e-6 node tolerance. See [`solve_miqp_opts`].
pub fn solve_miqp(
    problem: &MiqpProblem,
    i_b: u64,
    i_qp: usize,
    rule: BranchRule,
    warm: Option<&Incumbent>,
) -> Result<MiqpResult, BnbError> {
    solve_miqp_opts(problem, i_b, i_qp, rule, warm, Tolerances::default())
}

/// [`solve_miqp`] with an explicit node QP tolerance (oracles use 1e-9).
///
/// A warm incumbent primal-starts the root solve; its value seeds the
/// pruning bound only if it is integral and feasible for *this* problem
/// within [`INTEGRALITY_TOL`], since a shifted horizon solution generally
/// satisfies a different parameter row.
pub fn solve_miqp_opts(
    problem: &MiqpProblem,
    i_b: u64,
    i_qp: usize,
    rule: BranchRule,
    warm: Option<&Incumbent>,
    node_tol: Tolerances,
) -> Result<MiqpResult, BnbError> {
    validate(problem, i_b, i_qp)?;
    let mut state = IncumbentState::default();
    let mut root_warm: Option<WarmStart> = None;
    if let Some(w) = warm {
        if w.y_best.len() != problem.qp.n() {
            return Err(BnbError::WarmStartDimension { got: w.y_best.len(), expected: problem.qp.n() });
        }
        root_warm = Some(WarmStart::primal_only(w.y_best.clone()));
        if w.integral && problem.qp.violation_inf(&w.y_best) <= INTEGRALITY_TOL {
            state.best = Some(w.clone());
        }
    }

    let mut tree = vec![BnbNode::root()];
    let mut log: Vec<TreeLogEntry> = Vec::new();
    let mut solves: u64 = 0;
    let mut qp_total: u64 = 0;
    let mut any_sibling_kill = false;
    let mut any_limited_solve = false;
    let mut exhausted = false;

    let entry = |tree: &[BnbNode], id: usize, action: TreeAction, psi: f64, residual: f64| TreeLogEntry {
        node_id: id,
        parent_id: tree[id].parent_id,
        depth: tree[id].depth,
        action,
        psi,
        residual_inf: residual,
    };

    while solves < i_b {
        let Some(id) = pop_next(&tree, rule) else {
            exhausted = true;
            break;
        };
        let node_qp = node_problem(problem, &tree[id])?;
        let warm_ref = if id == 0 { root_warm.as_ref() } else { None };
        let result = solve_qp(&node_qp, warm_ref, i_qp, node_tol)?;
        solves += 1;
        qp_total += result.iterations_used as u64;
        if result.status == QpStatus::IterationLimited {
            any_limited_solve = true;
        }
        log.push(entry(&tree, id, TreeAction::Solved, result.objective, result.primal_residual_inf));
        tree[id].relaxed_result = Some(result);

        let outcome = prune(problem, &mut tree, id, &mut state, rule);
        if outcome.pruned_infeasible {
            log.push(entry(&tree, id, TreeAction::PrunedInfeasible, f64::NAN, f64::NAN));
            continue;
        }
        if let Some(s) = outcome.killed_sibling {
            any_sibling_kill = true;
            log.push(entry(&tree, s, TreeAction::PrunedDepthFirst, f64::NAN, f64::NAN));
        }
        if let Some(psi) = outcome.pruned_bound {
            log.push(entry(&tree, id, TreeAction::PrunedBound, psi, f64::NAN));
            continue;
        }
        let has_unpinned = tree[id].depth < problem.binary_indices.len();
        if has_unpinned {
            log.push(entry(&tree, id, TreeAction::Branched, f64::NAN, f64::NAN));
            branch(problem, &mut tree, id)?;
        }
    }
    if !exhausted && pop_next(&tree, rule).is_none() {
        exhausted = true;
    }

    if !exhausted {
        // Budget ran out with live nodes: give the two oldest unsolved nodes
        // a final solve each, for incumbent updates only.
        let mut finals: Vec<usize> =
            tree.iter().filter(|n| n.alive && !n.is_solved()).map(|n| n.id).collect();
        finals.truncate(2);
        for id in finals {
            let node_qp = node_problem(problem, &tree[id])?;
            let result = solve_qp(&node_qp, None, i_qp, node_tol)?;
            solves += 1;
            qp_total += result.iterations_used as u64;
            log.push(entry(&tree, id, TreeAction::FinalSolve, result.objective, result.primal_residual_inf));
            if result.status != QpStatus::PrimalInfeasible {
                state.offer(problem, &result.iterate, id);
            }
            tree[id].relaxed_result = Some(result);
        }
    }

    let (y, psi, status) = if let Some(best) = state.best {
        let provably_optimal = exhausted && !any_sibling_kill && !any_limited_solve;
        let status = if provably_optimal { MiqpStatus::IntegralOptimal } else { MiqpStatus::IntegralFeasible };
        (best.y_best, best.psi_best, status)
    } else if let Some(relaxed) = state.relaxed {
        (relaxed.y_best, relaxed.psi_best, MiqpStatus::RelaxedOnly)
    } else {
        // Every node certified infeasible; surface the root iterate so the
        // caller can inspect where the relaxation ended up.
        let root = tree[0].relaxed_result.as_ref().expect("root is always solved");
        (root.iterate.clone(), PSI_SENTINEL, MiqpStatus::Infeasible)
    };
    Ok(MiqpResult { y, psi, status, bnb_iterations_used: solves, qp_iterations_total: qp_total, tree_log: log })
}

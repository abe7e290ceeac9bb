//! Scenario files: a sectioned key-value text format mapping one-to-one onto
//! [`Scenario`], plus an optional `[sweep]` section listing limit values to
//! run the same scenario under. Unknown sections or keys are rejected, and
//! every diagnostic carries the offending line number.

use thiserror::Error;

use crate::bnb::BranchRule;
use crate::builder::{
    ExampleKind, MinThrustWeights, SwitchingBoxes, SwitchingWeights, TerminalBox, ThrustLimits,
};
use crate::cw::{CwParams, State};
use crate::qp::Tolerances;
use crate::sim::{ControlMode, Scenario, SimError};
use crate::uniting::{IterationSchedule, LimitedAxis, Limits, LyapunovConfig, LyapunovKind};

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {what}")]
    Line { line: usize, what: String },
    #[error("missing key `{key}` in section [{section}]")]
    MissingKey { section: &'static str, key: &'static str },
    #[error(transparent)]
    Invalid(#[from] SimError),
}

/// Values to sweep the low limit of the limited axis over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepList {
    Bnb(Vec<u64>),
    Qp(Vec<usize>),
}

impl SweepList {
    pub fn len(&self) -> usize {
        match self {
            SweepList::Bnb(v) => v.len(),
            SweepList::Qp(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The swept value at `index`, as a display number for summary tables.
    pub fn value_str(&self, index: usize) -> String {
        match self {
            SweepList::Bnb(v) => v[index].to_string(),
            SweepList::Qp(v) => v[index].to_string(),
        }
    }
}

/// A parsed scenario file: the base scenario and the optional sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub sweep: Option<SweepList>,
}

impl ScenarioFile {
    /// The scenario for one sweep point. The swept value replaces the low
    /// limit; under fixed limits it replaces the high (active) limit too, so
    /// a fixed-mode sweep varies the pinned budget.
    pub fn sweep_point(&self, index: usize) -> Result<Scenario, ScenarioError> {
        let Some(sweep) = &self.sweep else {
            return Err(SimError::InvalidScenario { what: "file has no [sweep] section".into() }
                .into());
        };
        let mut sc = self.scenario.clone();
        match sweep {
            SweepList::Bnb(vals) => {
                sc.schedule.low.i_b = vals[index];
                if sc.mode == ControlMode::FixedLimits {
                    sc.schedule.high.i_b = vals[index];
                    sc.schedule.base.i_b = vals[index];
                }
            }
            SweepList::Qp(vals) => {
                sc.schedule.low.i_qp = vals[index];
                if sc.mode == ControlMode::FixedLimits {
                    sc.schedule.high.i_qp = vals[index];
                    sc.schedule.base.i_qp = vals[index];
                }
            }
        }
        sc.validate()?;
        Ok(sc)
    }
}

struct RawLine {
    line: usize,
    section: String,
    key: String,
    value: String,
}

fn err(line: usize, what: impl Into<String>) -> ScenarioError {
    ScenarioError::Line { line, what: what.into() }
}

fn tokenize(text: &str) -> Result<Vec<RawLine>, ScenarioError> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
            continue;
        }
        if let Some(name) = t.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line, format!("unterminated section header `{t}`")))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected `key = value`, found `{t}`")))?;
        if section.is_empty() {
            return Err(err(line, "key before any [section] header"));
        }
        out.push(RawLine {
            line,
            section: section.clone(),
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

struct Fields {
    raw: Vec<RawLine>,
    used: Vec<bool>,
}

impl Fields {
    fn take(&mut self, section: &str, key: &str) -> Option<(usize, String)> {
        for (i, r) in self.raw.iter().enumerate() {
            if !self.used[i] && r.section == section && r.key == key {
                self.used[i] = true;
                return Some((r.line, r.value.clone()));
            }
        }
        None
    }

    fn require(
        &mut self,
        section: &'static str,
        key: &'static str,
    ) -> Result<(usize, String), ScenarioError> {
        self.take(section, key).ok_or(ScenarioError::MissingKey { section, key })
    }

    fn finish(&self) -> Result<(), ScenarioError> {
        for (i, r) in self.raw.iter().enumerate() {
            if !self.used[i] {
                return Err(err(
                    r.line,
                    format!("unknown key `{}` in section [{}]", r.key, r.section),
                ));
            }
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ScenarioError> {
    v.parse().map_err(|_| err(line, format!("key `{key}`: cannot parse `{v}`")))
}

fn parse_floats(line: usize, key: &str, v: &str, n: usize) -> Result<Vec<f64>, ScenarioError> {
    let vals: Vec<f64> = v
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| err(line, format!("key `{key}`: cannot parse `{v}` as numbers")))?;
    if vals.len() != n {
        return Err(err(line, format!("key `{key}`: expected {n} values, got {}", vals.len())));
    }
    Ok(vals)
}

macro_rules! take_or {
    ($fields:expr, $section:literal, $key:literal, $default:expr) => {
        match $fields.take($section, $key) {
            Some((line, v)) => parse_num(line, $key, &v)?,
            None => $default,
        }
    };
}

/// Parse a scenario file. All scenario invariants are enforced here, so a
/// returned file is runnable as-is.
pub fn parse_scenario(text: &str) -> Result<ScenarioFile, ScenarioError> {
    let raw = tokenize(text)?;
    let used = vec![false; raw.len()];
    let mut f = Fields { raw, used };

    let (line, v) = f.require("scenario", "example")?;
    let example = match v.as_str() {
        "switching_thrusters" => ExampleKind::SwitchingThrusters,
        "min_thrust" => ExampleKind::MinThrust,
        other => return Err(err(line, format!("unknown example `{other}`"))),
    };
    let (line, v) = f.require("scenario", "x0")?;
    let x0 = State::from_column_slice(&parse_floats(line, "x0", &v, 6)?);
    let horizon = {
        let (line, v) = f.require("scenario", "horizon")?;
        parse_num(line, "horizon", &v)?
    };
    let samples = {
        let (line, v) = f.require("scenario", "samples")?;
        parse_num(line, "samples", &v)?
    };
    let (line, v) = f.require("scenario", "mode")?;
    let mode = match v.as_str() {
        "fixed" => ControlMode::FixedLimits,
        "uniting" => ControlMode::Uniting,
        other => return Err(err(line, format!("unknown mode `{other}` (fixed|uniting)"))),
    };
    let (line, v) = f.require("scenario", "prune_rule")?;
    let prune_rule = match v.as_str() {
        "depth_first" => BranchRule::DepthFirst,
        "best_first" => BranchRule::BestFirst,
        other => {
            return Err(err(line, format!("unknown prune_rule `{other}` (depth_first|best_first)")))
        }
    };
    let rng_seed = take_or!(f, "scenario", "rng_seed", 0u64);

    let n_l = {
        let (line, v) = f.require("dynamics", "n_l")?;
        parse_num(line, "n_l", &v)?
    };
    let m_s = {
        let (line, v) = f.require("dynamics", "m_s")?;
        parse_num(line, "m_s", &v)?
    };
    let dt = {
        let (line, v) = f.require("dynamics", "dt")?;
        parse_num(line, "dt", &v)?
    };
    let dynamics = CwParams::new(n_l, m_s, dt)
        .map_err(|e| err(0, format!("section [dynamics]: {e}")))?;

    let (line, v) = f.require("limits", "axis")?;
    let axis = match v.as_str() {
        "bnb" => LimitedAxis::BranchAndBound,
        "qp" => LimitedAxis::QuadraticProgramming,
        other => return Err(err(line, format!("unknown limits axis `{other}` (bnb|qp)"))),
    };
    let schedule = match axis {
        LimitedAxis::BranchAndBound => {
            let low = {
                let (line, v) = f.require("limits", "low")?;
                parse_num(line, "low", &v)?
            };
            let high = {
                let (line, v) = f.require("limits", "high")?;
                parse_num(line, "high", &v)?
            };
            let base = {
                let (line, v) = f.require("limits", "base")?;
                parse_num(line, "base", &v)?
            };
            IterationSchedule {
                low: Limits { i_b: low, i_qp: base },
                high: Limits { i_b: high, i_qp: base },
                base: Limits { i_b: high, i_qp: base },
                limited_axis: axis,
            }
        }
        LimitedAxis::QuadraticProgramming => {
            let low = {
                let (line, v) = f.require("limits", "low")?;
                parse_num(line, "low", &v)?
            };
            let high = {
                let (line, v) = f.require("limits", "high")?;
                parse_num(line, "high", &v)?
            };
            let base = {
                let (line, v) = f.require("limits", "base")?;
                parse_num(line, "base", &v)?
            };
            IterationSchedule {
                low: Limits { i_b: base, i_qp: low },
                high: Limits { i_b: base, i_qp: high },
                base: Limits { i_b: base, i_qp: high },
                limited_axis: axis,
            }
        }
    };

    let (line, v) = f.require("lyapunov", "kind")?;
    let kind = match v.as_str() {
        "objective" => LyapunovKind::Objective,
        "feasibility" => LyapunovKind::Feasibility,
        other => {
            return Err(err(line, format!("unknown lyapunov kind `{other}` (objective|feasibility)")))
        }
    };
    let theta = {
        let (line, v) = f.require("lyapunov", "theta")?;
        parse_num(line, "theta", &v)?
    };
    let sigma = {
        let (line, v) = f.require("lyapunov", "sigma")?;
        parse_num(line, "sigma", &v)?
    };
    let c0 = {
        let (line, v) = f.require("lyapunov", "c0")?;
        parse_num(line, "c0", &v)?
    };
    let c1 = {
        let (line, v) = f.require("lyapunov", "c1")?;
        parse_num(line, "c1", &v)?
    };
    let lyapunov = LyapunovConfig::new(kind, theta, sigma, c0, c1)
        .map_err(|e| err(0, format!("section [lyapunov]: {e}")))?;

    let sw = SwitchingWeights::default();
    let switching_weights = SwitchingWeights {
        alpha_v1: take_or!(f, "switching", "alpha_v1", sw.alpha_v1),
        alpha_v2: take_or!(f, "switching", "alpha_v2", sw.alpha_v2),
        alpha_state: take_or!(f, "switching", "alpha_state", sw.alpha_state),
    };
    let sb = SwitchingBoxes::default();
    let switching_boxes = SwitchingBoxes {
        pos_box: take_or!(f, "switching", "pos_box", sb.pos_box),
        vel_box: take_or!(f, "switching", "vel_box", sb.vel_box),
        thrust_box: take_or!(f, "switching", "thrust_box", sb.thrust_box),
    };
    let big_m = take_or!(f, "switching", "big_m", 0.1);

    let mw = MinThrustWeights::default();
    let min_thrust_weights = MinThrustWeights {
        state_weight: take_or!(f, "min_thrust", "state_weight", mw.state_weight),
        thrust_weight: take_or!(f, "min_thrust", "thrust_weight", mw.thrust_weight),
    };
    let tl = ThrustLimits::default();
    let thrust_limits = ThrustLimits {
        v_min: take_or!(f, "min_thrust", "v_min", tl.v_min),
        v_max: take_or!(f, "min_thrust", "v_max", tl.v_max),
    };
    let tb = TerminalBox::default();
    let terminal_box = TerminalBox {
        pos_halfwidth: take_or!(f, "min_thrust", "terminal_pos", tb.pos_halfwidth),
        vel_halfwidth: take_or!(f, "min_thrust", "terminal_vel", tb.vel_halfwidth),
    };
    let node_tol = Tolerances::uniform(take_or!(f, "solver", "node_tol", 1e-6));

    let sweep = match (f.take("sweep", "i_b_low"), f.take("sweep", "i_qp_low")) {
        (Some(_), Some((line, _))) => {
            return Err(err(line, "sweep lists both i_b_low and i_qp_low; pick one"))
        }
        (Some((line, v)), None) => {
            if axis != LimitedAxis::BranchAndBound {
                return Err(err(line, "sweep key i_b_low requires limits axis `bnb`"));
            }
            let vals: Vec<u64> = v
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| err(line, format!("key `i_b_low`: cannot parse `{v}`")))?;
            if vals.is_empty() {
                return Err(err(line, "sweep list i_b_low is empty"));
            }
            Some(SweepList::Bnb(vals))
        }
        (None, Some((line, v))) => {
            if axis != LimitedAxis::QuadraticProgramming {
                return Err(err(line, "sweep key i_qp_low requires limits axis `qp`"));
            }
            let vals: Vec<usize> = v
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| err(line, format!("key `i_qp_low`: cannot parse `{v}`")))?;
            if vals.is_empty() {
                return Err(err(line, "sweep list i_qp_low is empty"));
            }
            Some(SweepList::Qp(vals))
        }
        (None, None) => None,
    };

    f.finish()?;

    let scenario = Scenario {
        example,
        x0,
        horizon,
        samples,
        mode,
        schedule,
        lyapunov,
        prune_rule,
        dynamics,
        switching_weights,
        switching_boxes,
        big_m,
        min_thrust_weights,
        thrust_limits,
        terminal_box,
        node_tol,
        rng_seed,
    };
    scenario.validate()?;
    let file = ScenarioFile { scenario, sweep };
    if let Some(sweep) = &file.sweep {
        for i in 0..sweep.len() {
            file.sweep_point(i)?;
        }
    }
    Ok(file)
}

fn floats(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Render a scenario file; `parse_scenario(&emit_scenario(f)) == f`.
pub fn emit_scenario(file: &ScenarioFile) -> String {
    let sc = &file.scenario;
    let mut out = String::new();
    out.push_str("[scenario]\n");
    out.push_str(&format!(
        "example = {}\n",
        match sc.example {
            ExampleKind::SwitchingThrusters => "switching_thrusters",
            _ => "min_thrust",
        }
    ));
    out.push_str(&format!("x0 = {}\n", floats(sc.x0.iter().copied())));
    out.push_str(&format!("horizon = {}\n", sc.horizon));
    out.push_str(&format!("samples = {}\n", sc.samples));
    out.push_str(&format!(
        "mode = {}\n",
        if sc.mode == ControlMode::Uniting { "uniting" } else { "fixed" }
    ));
    out.push_str(&format!(
        "prune_rule = {}\n",
        if sc.prune_rule == BranchRule::DepthFirst { "depth_first" } else { "best_first" }
    ));
    out.push_str(&format!("rng_seed = {}\n\n", sc.rng_seed));

    out.push_str("[dynamics]\n");
    out.push_str(&format!("n_l = {}\n", sc.dynamics.n_l));
    out.push_str(&format!("m_s = {}\n", sc.dynamics.m_s));
    out.push_str(&format!("dt = {}\n\n", sc.dynamics.dt));

    out.push_str("[limits]\n");
    match sc.schedule.limited_axis {
        LimitedAxis::BranchAndBound => {
            out.push_str("axis = bnb\n");
            out.push_str(&format!("low = {}\n", sc.schedule.low.i_b));
            out.push_str(&format!("high = {}\n", sc.schedule.high.i_b));
            out.push_str(&format!("base = {}\n\n", sc.schedule.base.i_qp));
        }
        LimitedAxis::QuadraticProgramming => {
            out.push_str("axis = qp\n");
            out.push_str(&format!("low = {}\n", sc.schedule.low.i_qp));
            out.push_str(&format!("high = {}\n", sc.schedule.high.i_qp));
            out.push_str(&format!("base = {}\n\n", sc.schedule.base.i_b));
        }
    }

    out.push_str("[lyapunov]\n");
    out.push_str(&format!(
        "kind = {}\n",
        if sc.lyapunov.kind == LyapunovKind::Objective { "objective" } else { "feasibility" }
    ));
    out.push_str(&format!("theta = {}\n", sc.lyapunov.theta));
    out.push_str(&format!("sigma = {}\n", sc.lyapunov.sigma));
    out.push_str(&format!("c0 = {}\n", sc.lyapunov.c0));
    out.push_str(&format!("c1 = {}\n\n", sc.lyapunov.c1));

    out.push_str("[switching]\n");
    out.push_str(&format!("alpha_v1 = {}\n", sc.switching_weights.alpha_v1));
    out.push_str(&format!("alpha_v2 = {}\n", sc.switching_weights.alpha_v2));
    out.push_str(&format!("alpha_state = {}\n", sc.switching_weights.alpha_state));
    out.push_str(&format!("big_m = {}\n", sc.big_m));
    out.push_str(&format!("pos_box = {}\n", sc.switching_boxes.pos_box));
    out.push_str(&format!("vel_box = {}\n", sc.switching_boxes.vel_box));
    out.push_str(&format!("thrust_box = {}\n\n", sc.switching_boxes.thrust_box));

    out.push_str("[min_thrust]\n");
    out.push_str(&format!("state_weight = {}\n", sc.min_thrust_weights.state_weight));
    out.push_str(&format!("thrust_weight = {}\n", sc.min_thrust_weights.thrust_weight));
    out.push_str(&format!("v_min = {}\n", sc.thrust_limits.v_min));
    out.push_str(&format!("v_max = {}\n", sc.thrust_limits.v_max));
    out.push_str(&format!("terminal_pos = {}\n", sc.terminal_box.pos_halfwidth));
    out.push_str(&format!("terminal_vel = {}\n\n", sc.terminal_box.vel_halfwidth));

    out.push_str("[solver]\n");
    out.push_str(&format!("node_tol = {}\n", sc.node_tol.primal));

    if let Some(sweep) = &file.sweep {
        out.push_str("\n[sweep]\n");
        match sweep {
            SweepList::Bnb(vals) => {
                let list: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("i_b_low = {}\n", list.join(" ")));
            }
            SweepList::Qp(vals) => {
                let list: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("i_qp_low = {}\n", list.join(" ")));
            }
        }
    }
    out
}

//! Trace persistence: the experiment CSV format (header row, one row per
//! sample, `# key=value` summary comments appended) and its parser.

use thiserror::Error;

use crate::bnb::MiqpStatus;
use crate::cw::State;
use crate::sim::{SimOutcome, SimRow, SimSummary, SimTrace};

/// The one and only column list, in order.
pub const CSV_HEADER: &str = "k,x1,x2,x3,x4,x5,x6,u1,u2,u3,u4,u5,u6,q,V,psi,viol_inf,ib_used,iqp_total,status,switched";

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("line 1: expected header `{CSV_HEADER}`, found `{found}`")]
    Header { found: String },
    #[error("line {line}: {what}")]
    Row { line: usize, what: String },
    #[error("missing summary key `{key}`")]
    MissingSummary { key: &'static str },
}

fn outcome_str(o: SimOutcome) -> String {
    match o {
        SimOutcome::Completed => "completed".into(),
        SimOutcome::Unstable { at } => format!("unstable:{at}"),
        SimOutcome::Infeasible { at } => format!("infeasible:{at}"),
    }
}

fn outcome_parse(s: &str) -> Option<SimOutcome> {
    if s == "completed" {
        return Some(SimOutcome::Completed);
    }
    let (kind, at) = s.split_once(':')?;
    let at = at.parse().ok()?;
    match kind {
        "unstable" => Some(SimOutcome::Unstable { at }),
        "infeasible" => Some(SimOutcome::Infeasible { at }),
        _ => None,
    }
}

/// Render a trace in the documented CSV format. Floats print as Rust's
/// shortest round-trip decimals, so equal traces produce identical bytes.
pub fn trace_to_csv(trace: &SimTrace) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let x: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
        let u: Vec<String> = r.u.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.k,
            x.join(","),
            u.join(","),
            r.q,
            r.v,
            r.psi,
            r.viol_inf,
            r.ib_used,
            r.iqp_total,
            r.status.as_str(),
            r.switched,
        ));
    }
    let s = &trace.summary;
    out.push_str(&format!("# samples={}\n", trace.rows.len()));
    out.push_str(&format!("# outcome={}\n", outcome_str(trace.outcome)));
    let fs: Vec<String> = trace.final_state.iter().map(|v| v.to_string()).collect();
    out.push_str(&format!("# final_state={}\n", fs.join(" ")));
    out.push_str(&format!("# final_error_l2={}\n", s.final_error_l2));
    out.push_str(&format!("# switch_count={}\n", s.switch_count));
    out.push_str(&format!("# window={}\n", s.window));
    out.push_str(&format!("# avg_ib={}\n", s.avg_ib));
    out.push_str(&format!("# avg_iqp={}\n", s.avg_iqp));
    out
}

fn field<'a>(
    parts: &mut impl Iterator<Item = &'a str>,
    line: usize,
    name: &str,
) -> Result<&'a str, TraceError> {
    parts.next().ok_or_else(|| TraceError::Row { line, what: format!("missing column {name}") })
}

fn num<T: std::str::FromStr>(raw: &str, line: usize, name: &str) -> Result<T, TraceError> {
    raw.parse().map_err(|_| TraceError::Row {
        line,
        what: format!("column {name}: cannot parse `{raw}`"),
    })
}

/// Parse a trace CSV produced by [`trace_to_csv`].
pub fn trace_from_csv(text: &str) -> Result<SimTrace, TraceError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| TraceError::Header { found: String::new() })?;
    if header != CSV_HEADER {
        return Err(TraceError::Header { found: header.to_string() });
    }
    let mut rows = Vec::new();
    let mut summary: Vec<(String, String)> = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.is_empty() {
            continue;
        }
        if let Some(rest) = raw.strip_prefix('#') {
            let body = rest.trim();
            let (k, v) = body.split_once('=').ok_or_else(|| TraceError::Row {
                line,
                what: format!("summary comment without key=value: `{raw}`"),
            })?;
            summary.push((k.trim().to_string(), v.trim().to_string()));
            continue;
        }
        let mut parts = raw.split(',');
        let k = num(field(&mut parts, line, "k")?, line, "k")?;
        let mut x = State::zeros();
        for (i, slot) in x.iter_mut().enumerate() {
            let name = format!("x{}", i + 1);
            *slot = num(field(&mut parts, line, &name)?, line, &name)?;
        }
        let mut u = [0.0; 6];
        for (i, slot) in u.iter_mut().enumerate() {
            let name = format!("u{}", i + 1);
            *slot = num(field(&mut parts, line, &name)?, line, &name)?;
        }
        let q = num(field(&mut parts, line, "q")?, line, "q")?;
        let v = num(field(&mut parts, line, "V")?, line, "V")?;
        let psi = num(field(&mut parts, line, "psi")?, line, "psi")?;
        let viol_inf = num(field(&mut parts, line, "viol_inf")?, line, "viol_inf")?;
        let ib_used = num(field(&mut parts, line, "ib_used")?, line, "ib_used")?;
        let iqp_total = num(field(&mut parts, line, "iqp_total")?, line, "iqp_total")?;
        let status_raw = field(&mut parts, line, "status")?;
        let status = MiqpStatus::from_str_opt(status_raw).ok_or_else(|| TraceError::Row {
            line,
            what: format!("column status: unknown value `{status_raw}`"),
        })?;
        let switched = num(field(&mut parts, line, "switched")?, line, "switched")?;
        if let Some(extra) = parts.next() {
            return Err(TraceError::Row { line, what: format!("unexpected extra column `{extra}`") });
        }
        rows.push(SimRow { k, x, u, q, v, psi, viol_inf, ib_used, iqp_total, status, switched });
    }
    let get = |key: &'static str| -> Result<&str, TraceError> {
        summary
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or(TraceError::MissingSummary { key })
    };
    let outcome = outcome_parse(get("outcome")?).ok_or_else(|| TraceError::Row {
        line: 0,
        what: format!("bad outcome value `{}`", get("outcome").unwrap_or("")),
    })?;
    let fs_raw = get("final_state")?;
    let fs_vals: Vec<f64> = fs_raw
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| TraceError::Row { line: 0, what: format!("bad final_state `{fs_raw}`") })?;
    if fs_vals.len() != 6 {
        return Err(TraceError::Row {
            line: 0,
            what: format!("final_state needs 6 entries, got {}", fs_vals.len()),
        });
    }
    let final_state = State::from_column_slice(&fs_vals);
    let parse_f = |key: &'static str| -> Result<f64, TraceError> {
        let raw = get(key)?;
        raw.parse().map_err(|_| TraceError::Row { line: 0, what: format!("bad {key} `{raw}`") })
    };
    let summary = SimSummary {
        final_error_l2: parse_f("final_error_l2")?,
        switch_count: num(get("switch_count")?, 0, "switch_count")?,
        window: num(get("window")?, 0, "window")?,
        avg_ib: parse_f("avg_ib")?,
        avg_iqp: parse_f("avg_iqp")?,
    };
    Ok(SimTrace { rows, final_state, summary, outcome })
}

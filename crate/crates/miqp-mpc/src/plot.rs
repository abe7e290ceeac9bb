//! Deterministic SVG plot emitters for experiment traces: the in-plane
//! position trajectory and the state-error series. Output bytes depend only
//! on the input traces, so plots are diffable artifacts.

use crate::sim::SimTrace;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let mut r = Range { lo: f64::INFINITY, hi: f64::NEG_INFINITY };
        for v in values {
            if v.is_finite() {
                r.lo = r.lo.min(v);
                r.hi = r.hi.max(v);
            }
        }
        if !r.lo.is_finite() || !r.hi.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        // Degenerate (constant) data still needs a visible band; otherwise
        // pad five percent so extremes sit inside the frame.
        if r.hi - r.lo == 0.0 {
            Range { lo: r.lo - 0.5, hi: r.hi + 0.5 }
        } else {
            let pad = 0.05 * (r.hi - r.lo);
            Range { lo: r.lo - pad, hi: r.hi + pad }
        }
    }

    #[cfg(test)]
    fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

fn map_x(v: f64, r: Range) -> f64 {
    MARGIN_L + (v - r.lo) / (r.hi - r.lo) * (WIDTH - MARGIN_L - MARGIN_R)
}

fn map_y(v: f64, r: Range) -> f64 {
    // SVG y grows downward.
    HEIGHT - MARGIN_B - (v - r.lo) / (r.hi - r.lo) * (HEIGHT - MARGIN_T - MARGIN_B)
}

struct Frame {
    body: String,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, xr: Range, yr: Range) -> Frame {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        ));
        body.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
        let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
        body.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
        ));
        body.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"14\">{title}</text>\n",
            WIDTH / 2.0
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\">{x_label}</text>\n",
            WIDTH / 2.0,
            HEIGHT - 10.0
        ));
        body.push_str(&format!(
            "<text x=\"15\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\" transform=\"rotate(-90 15 {})\">{y_label}</text>\n",
            HEIGHT / 2.0,
            HEIGHT / 2.0
        ));
        // Extreme tick labels document the autoscaled data range.
        body.push_str(&format!(
            "<text x=\"{x0}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
            y0 + 15.0,
            xr.lo
        ));
        body.push_str(&format!(
            "<text x=\"{x1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
            y0 + 15.0,
            xr.hi
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"{y0}\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
            x0 - 5.0,
            yr.lo
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"{y1}\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
            x0 - 5.0,
            yr.hi
        ));
        Frame { body }
    }

    fn polyline(&mut self, points: &[(f64, f64)], xr: Range, yr: Range, color: &str) {
        let pts: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{},{}", map_x(x, xr), map_y(y, yr)))
            .collect();
        self.body.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }

    fn legend(&mut self, labels: &[&str]) {
        for (i, label) in labels.iter().enumerate() {
            let y = MARGIN_T + 14.0 * (i as f64 + 1.0);
            let color = PALETTE[i % PALETTE.len()];
            self.body.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
                WIDTH - MARGIN_R - 150.0,
                y - 9.0
            ));
            self.body.push_str(&format!(
                "<text x=\"{}\" y=\"{y}\" font-family=\"monospace\" font-size=\"11\">{label}</text>\n",
                WIDTH - MARGIN_R - 135.0
            ));
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// In-plane (first two state coordinates) trajectory, one polyline per
/// labeled trace.
pub fn position_plane_svg(traces: &[(&str, &SimTrace)]) -> String {
    let xr = Range::of(traces.iter().flat_map(|(_, t)| t.rows.iter().map(|r| r.x[0])));
    let yr = Range::of(traces.iter().flat_map(|(_, t)| t.rows.iter().map(|r| r.x[1])));
    let mut frame = Frame::new("position plane", "x1 [km]", "x2 [km]", xr, yr);
    for (i, (_, t)) in traces.iter().enumerate() {
        let pts: Vec<(f64, f64)> = t.rows.iter().map(|r| (r.x[0], r.x[1])).collect();
        frame.polyline(&pts, xr, yr, PALETTE[i % PALETTE.len()]);
    }
    let labels: Vec<&str> = traces.iter().map(|(l, _)| *l).collect();
    frame.legend(&labels);
    frame.finish()
}

/// State error `l2(x_k)` against the sample index, one polyline per trace.
pub fn error_series_svg(traces: &[(&str, &SimTrace)]) -> String {
    let xr = Range::of(traces.iter().flat_map(|(_, t)| t.rows.iter().map(|r| r.k as f64)));
    let yr = Range::of(traces.iter().flat_map(|(_, t)| t.rows.iter().map(|r| r.x.norm())));
    let mut frame = Frame::new("state error", "sample k", "l2 error [km]", xr, yr);
    for (i, (_, t)) in traces.iter().enumerate() {
        let pts: Vec<(f64, f64)> = t.rows.iter().map(|r| (r.k as f64, r.x.norm())).collect();
        frame.polyline(&pts, xr, yr, PALETTE[i % PALETTE.len()]);
    }
    let labels: Vec<&str> = traces.iter().map(|(l, _)| *l).collect();
    frame.legend(&labels);
    frame.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnb::MiqpStatus;
    use crate::cw::State;
    use crate::sim::{SimOutcome, SimRow, SimSummary};

    fn trace_from_states(states: &[[f64; 6]]) -> SimTrace {
        let rows: Vec<SimRow> = states
            .iter()
            .enumerate()
            .map(|(k, x)| SimRow {
                k,
                x: State::from_column_slice(x),
                u: [0.0; 6],
                q: 1,
                v: 0.0,
                psi: 0.0,
                viol_inf: 0.0,
                ib_used: 1,
                iqp_total: 1,
                status: MiqpStatus::IntegralOptimal,
                switched: false,
            })
            .collect();
        SimTrace {
            rows,
            final_state: State::zeros(),
            summary: SimSummary {
                final_error_l2: 0.0,
                switch_count: 0,
                window: states.len(),
                avg_ib: 1.0,
                avg_iqp: 1.0,
            },
            outcome: SimOutcome::Completed,
        }
    }

    #[test]
    fn zero_trace_draws_a_flat_line() {
        let t = trace_from_states(&[[0.0; 6], [0.0; 6], [0.0; 6]]);
        let svg = error_series_svg(&[("zero", &t)]);
        let points = svg
            .lines()
            .find(|l| l.starts_with("<polyline"))
            .and_then(|l| l.split("points=\"").nth(1))
            .and_then(|l| l.split('"').next())
            .unwrap();
        let ys: Vec<f64> = points
            .split(' ')
            .map(|p| p.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]), "flat series should stay level: {ys:?}");
    }

    #[test]
    fn two_traces_get_two_polylines_and_a_legend() {
        let a = trace_from_states(&[[0.0; 6], [1.0, 2.0, 0.0, 0.0, 0.0, 0.0]]);
        let b = trace_from_states(&[[5.0, -1.0, 0.0, 0.0, 0.0, 0.0], [4.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        let svg = position_plane_svg(&[("run a", &a), ("run b", &b)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">run a</text>") && svg.contains(">run b</text>"));
    }

    #[test]
    fn axis_range_covers_the_data_and_mapping_is_monotone() {
        let t = trace_from_states(&[
            [-3.0, 0.5, 0.0, 0.0, 0.0, 0.0],
            [7.0, -2.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 4.0, 0.0, 0.0, 0.0, 0.0],
        ]);
        let xr = Range::of(t.rows.iter().map(|r| r.x[0]));
        assert!(xr.contains(-3.0) && xr.contains(7.0));
        assert!(xr.lo < -3.0 && xr.hi > 7.0, "padding keeps extremes off the frame");
        let m = [map_x(-3.0, xr), map_x(1.0, xr), map_x(7.0, xr)];
        assert!(m[0] < m[1] && m[1] < m[2]);
        assert!(m[0] >= MARGIN_L && m[2] <= WIDTH - MARGIN_R);
    }

    #[test]
    fn output_bytes_are_deterministic() {
        let t = trace_from_states(&[[0.1, 0.2, 0.0, 0.0, 0.0, 0.0], [0.3, -0.4, 0.0, 0.0, 0.0, 0.0]]);
        let a = position_plane_svg(&[("t", &t)]);
        let b = position_plane_svg(&[("t", &t)]);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg ") && a.trim_end().ends_with("</svg>"));
    }
}

//! SVG rendering of a scenario and executed trajectories.
//!
//! Output is a pure function of its inputs: coordinates are printed with a
//! fixed number of decimals and elements are emitted in a fixed order.

use std::f64::consts::PI;
use std::fmt::Write;

use crate::geom::Vec2;
use crate::scenario::{ScenarioConfig, TargetSpec};
use crate::trajectory::TrajectoryLog;

/// Rate threshold defining a target's effective communication range.
pub const COMM_RATE_THRESHOLD: f64 = 0.01;

const PX_PER_UNIT: f64 = 40.0;
const MARGIN: f64 = 1.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];

/// Planar radius within which an agent at `height` receives at least
/// `threshold` from `target`; zero if the rate never reaches it.
pub fn comm_range_radius(target: &TargetSpec, height: f64, threshold: f64) -> f64 {
    if target.bandwidth <= 0.0 || threshold <= 0.0 {
        return 0.0;
    }
    // B·log2(1 + K/d²) = c  ⇔  d² = K / (2^(c/B) − 1)
    let d_sq = target.gain / ((threshold / target.bandwidth).exp2() - 1.0);
    (d_sq - height * height).max(0.0).sqrt()
}

struct Frame {
    lo: Vec2,
    hi: Vec2,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        (v - self.lo.x + MARGIN) * PX_PER_UNIT
    }

    fn y(&self, v: f64) -> f64 {
        (self.hi.y - v + MARGIN) * PX_PER_UNIT
    }

    fn width(&self) -> f64 {
        (self.hi.x - self.lo.x + 2.0 * MARGIN) * PX_PER_UNIT
    }

    fn height(&self) -> f64 {
        (self.hi.y - self.lo.y + 2.0 * MARGIN) * PX_PER_UNIT
    }
}

fn star_points(frame: &Frame, c: Vec2, outer: f64) -> String {
    (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { outer } else { outer * 0.45 };
            let a = PI / 2.0 + k as f64 * PI / 5.0;
            format!("{:.2},{:.2}", frame.x(c.x) + r * a.cos(), frame.y(c.y) - r * a.sin())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders targets with their communication disks, start dots, final
/// crosses, and one polyline per agent for each trajectory.
pub fn render_svg(scenario: &ScenarioConfig, trajectories: &[&TrajectoryLog]) -> String {
    let (mut lo, mut hi) = scenario.workspace_bounds();
    for log in trajectories {
        for s in &log.states {
            for p in &s.positions {
                lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
        }
    }
    let frame = Frame { lo, hi };
    let height = scenario.agents.first().map_or(0.0, |a| a.height);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#,
        w = frame.width(),
        h = frame.height()
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(out, r#"<g id="ranges">"#);
    for t in &scenario.targets {
        let r = comm_range_radius(t, height, COMM_RATE_THRESHOLD);
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#d62728" fill-opacity="0.06" stroke="#d62728" stroke-opacity="0.3"/>"##,
            frame.x(t.position.x),
            frame.y(t.position.y),
            r * PX_PER_UNIT
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g id="paths">"#);
    for log in trajectories {
        for j in 0..log.states.first().map_or(0, |s| s.positions.len()) {
            let pts = log
                .agent_path(j)
                .iter()
                .map(|p| format!("{:.2},{:.2}", frame.x(p.x), frame.y(p.y)))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                out,
                r#"<polyline points="{pts}" fill="none" stroke="{}" stroke-width="2"/>"#,
                PALETTE[j % PALETTE.len()]
            );
        }
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g id="targets">"#);
    for t in &scenario.targets {
        let _ = writeln!(
            out,
            r##"<polygon points="{}" fill="#d62728"/>"##,
            star_points(&frame, t.position, 8.0)
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g id="agents">"#);
    for a in &scenario.agents {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="5" fill="#1f3fbf"/>"##,
            frame.x(a.start.x),
            frame.y(a.start.y)
        );
    }
    for (j, a) in scenario.agents.iter().enumerate() {
        let (x, y) = (frame.x(a.final_pos.x), frame.y(a.final_pos.y));
        let _ = writeln!(
            out,
            r#"<path d="M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}" stroke="{}" stroke-width="2.5"/>"#,
            x - 6.0,
            y - 6.0,
            x + 6.0,
            y + 6.0,
            x - 6.0,
            y + 6.0,
            x + 6.0,
            y - 6.0,
            PALETTE[j % PALETTE.len()]
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}

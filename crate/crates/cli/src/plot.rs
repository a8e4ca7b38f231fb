//! Self-contained SVG charts.
//!
//! Telemetry mode draws mean reward against environment steps (one
//! `circle.point` per iteration) above per-iteration success bars
//! (`rect.spike`). Report mode draws one `g.run` group per transfer run
//! holding a success bar and a failure bar.

use std::fmt::Write;

use rtl_core::evalx::ReportRow;
use rtl_core::telemetry::TelemetryRow;

const W: f64 = 720.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;

struct Panel {
    top: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x;
        LEFT + (x - lo) / (hi - lo) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y;
        self.top + self.height - (y - lo) / (hi - lo) * self.height
    }

    fn axes(&self, svg: &mut String, x_label: &str, y_label: &str) {
        let bottom = self.top + self.height;
        let _ = write!(
            svg,
            r##"<g class="axes" stroke="#333" stroke-width="1"><line x1="{LEFT}" y1="{bottom}" x2="{}" y2="{bottom}"/><line x1="{LEFT}" y1="{}" x2="{LEFT}" y2="{bottom}"/></g>"##,
            W - RIGHT,
            self.top
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let _ = write!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                self.px(xv),
                bottom + 14.0,
                tick(xv)
            );
            let _ = write!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                self.py(yv) + 3.0,
                tick(yv)
            );
        }
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{x_label}</text>"#,
            LEFT + (W - LEFT - RIGHT) / 2.0,
            bottom + 30.0
        );
        let _ = write!(
            svg,
            r#"<text x="14" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
            self.top + self.height / 2.0,
            self.top + self.height / 2.0
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 100.0).round() / 100.0)
    }
}

/// `(lo, hi)` covering `values`, widened when degenerate.
fn range(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    (lo, hi)
}

fn open(title: &str) -> String {
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
    );
    let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{title}</text>"#,
        W / 2.0
    );
    svg
}

pub fn telemetry_svg(rows: &[TelemetryRow]) -> String {
    let mut svg = open("Mean reward and successes per iteration");
    let x = range(rows.iter().map(|r| r.env_steps as f64), true);
    let reward = Panel {
        top: 40.0,
        height: 240.0,
        x,
        y: range(rows.iter().map(|r| r.mean_reward), false),
    };
    let spikes = Panel {
        top: 330.0,
        height: 100.0,
        x,
        y: range(rows.iter().map(|r| r.success_count as f64), true),
    };
    reward.axes(&mut svg, "environment steps", "mean reward");
    spikes.axes(&mut svg, "environment steps", "successes");

    if !rows.is_empty() {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", reward.px(r.env_steps as f64), reward.py(r.mean_reward)))
            .collect();
        let _ = write!(
            svg,
            r##"<polyline class="reward" fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
            pts.join(" ")
        );
    }
    for r in rows {
        let _ = write!(
            svg,
            r##"<circle class="point" cx="{:.2}" cy="{:.2}" r="2" fill="#1f77b4"/>"##,
            reward.px(r.env_steps as f64),
            reward.py(r.mean_reward)
        );
    }
    let bar = ((W - LEFT - RIGHT) / rows.len().max(1) as f64 * 0.8).clamp(1.0, 12.0);
    for r in rows {
        let top = spikes.py(r.success_count as f64);
        let _ = write!(
            svg,
            r##"<rect class="spike" x="{:.2}" y="{top:.2}" width="{bar:.2}" height="{:.2}" fill="#2ca02c"/>"##,
            spikes.px(r.env_steps as f64) - bar / 2.0,
            spikes.py(0.0) - top
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn report_svg(rows: &[ReportRow]) -> String {
    let runs: Vec<&ReportRow> = rows.iter().filter(|r| !r.is_summary()).collect();
    let mut svg = open("Successes and failures per transfer run");
    let n = runs.len().max(1) as f64;
    let failures = |r: &ReportRow| (r.collisions + r.oob + r.timeouts) as f64;
    let panel = Panel {
        top: 40.0,
        height: 360.0,
        x: (0.0, n),
        y: range(runs.iter().flat_map(|r| [r.successes as f64, failures(r)]), true),
    };
    panel.axes(&mut svg, "run", "episodes");
    let slot = (W - LEFT - RIGHT) / n;
    let bar = slot * 0.35;
    for (i, r) in runs.iter().enumerate() {
        let x0 = panel.px(i as f64) + slot * 0.15;
        let _ = write!(svg, r#"<g class="run" data-run="{}">"#, r.run);
        for (k, (class, v, color)) in [("success", r.successes as f64, "#2ca02c"), ("failure", failures(r), "#d62728")]
            .into_iter()
            .enumerate()
        {
            let top = panel.py(v);
            let _ = write!(
                svg,
                r#"<rect class="{class}" x="{:.2}" y="{top:.2}" width="{bar:.2}" height="{:.2}" fill="{color}"/>"#,
                x0 + k as f64 * bar,
                panel.py(0.0) - top
            );
        }
        svg.push_str("</g>");
    }
    let _ = write!(
        svg,
        r##"<g class="legend" font-size="11"><rect x="{0}" y="440" width="10" height="10" fill="#2ca02c"/><text x="{1}" y="449">successes</text><rect x="{2}" y="440" width="10" height="10" fill="#d62728"/><text x="{3}" y="449">failures</text></g>"##,
        LEFT,
        LEFT + 14.0,
        LEFT + 100.0,
        LEFT + 114.0
    );
    svg.push_str("</svg>\n");
    svg
}

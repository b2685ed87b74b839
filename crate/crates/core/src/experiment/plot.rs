//! Standalone SVG line plots of sampling-probability trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trajectory::TrajectoryLog;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders one polyline per dataset: x is the step, y the probability on a
/// fixed [0, 1] axis.
pub fn plot_svg(log: &TrajectoryLog) -> Result<String> {
    if log.rows.is_empty() {
        return Err(Error::Invalid("trajectory log has no rows".into()));
    }
    let (lo, hi) = log
        .rows
        .iter()
        .fold((u64::MAX, 0), |(lo, hi), r| (lo.min(r.step), hi.max(r.step)));
    let span = (hi - lo).max(1) as f64;
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |s: u64| LEFT + (s - lo) as f64 / span * pw;
    let y = |p: f64| TOP + (1.0 - p.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r##"<g id="axes" stroke="#333" stroke-width="1"><line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/></g>"##,
        TOP + ph,
        LEFT + pw,
        TOP + ph,
        TOP + ph
    )
    .unwrap();
    writeln!(s, r#"<g id="ticks" font-family="sans-serif" font-size="11">"#).unwrap();
    for i in 0..=4 {
        let p = i as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{p:.2}</text>"#, LEFT - 6.0, y(p) + 4.0).unwrap();
    }
    for (step, anchor) in [(lo, "start"), (hi, "end")] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="{anchor}">{step}</text>"#, x(step), TOP + ph + 16.0).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">probability</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    )
    .unwrap();
    writeln!(s, "</g>").unwrap();

    for (k, (id, name)) in log.datasets().iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = log
            .series(*id)
            .iter()
            .map(|&(st, p)| format!("{:.2},{:.2}", x(st), y(p)))
            .collect();
        writeln!(
            s,
            r#"<polyline class="series" data-dataset="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(name),
            pts.join(" ")
        )
        .unwrap();
        let ly = TOP + 14.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 14.0;
        writeln!(
            s,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads a trajectory CSV and writes its plot.
pub fn plot_trajectories(csv: &Path, out_svg: &Path) -> Result<()> {
    let log = TrajectoryLog::read(csv)?;
    let svg = plot_svg(&log).map_err(|e| match e {
        Error::Invalid(m) => Error::Invalid(format!("{}: {m}", csv.display())),
        other => other,
    })?;
    fs::write(out_svg, svg).map_err(|e| Error::io(out_svg, e))
}

//! SVG trajectory plots.

use std::fmt::Write as _;
use std::path::Path;

use super::EpisodeRecord;
use crate::error::Result;
use crate::world::Environment;

const VIEW: (f64, f64, f64, f64) = (-1.5, -1.5, 9.0, 9.0);
const FOLLOWER_COLORS: [&str; 4] = ["#2ca02c", "#9467bd", "#8c564b", "#e377c2"];

fn polyline(out: &mut String, pts: impl Iterator<Item = [f64; 2]>, stroke: &str, width: f64, extra: &str) {
    let mut coords = String::new();
    for (i, p) in pts.enumerate() {
        if i > 0 {
            coords.push(' ');
        }
        let _ = write!(coords, "{:.4},{:.4}", p[0], p[1]);
    }
    let _ = writeln!(
        out,
        r#"<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="{width}"{extra}/>"#
    );
}

/// SVG document text; y points up.
pub fn svg_string(record: &EpisodeRecord, env: &Environment) -> String {
    let (x0, y0, w, h) = VIEW;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0} {} {w} {h}" width="600" height="600">"#,
        -(y0 + h)
    );
    let _ = writeln!(out, r#"<g transform="scale(1,-1)">"#);
    let _ = writeln!(
        out,
        r##"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="#ffffff" stroke="#cccccc" stroke-width="0.02"/>"##
    );
    for o in &env.obstacles {
        let _ = writeln!(
            out,
            r##"<circle class="obstacle" cx="{:.4}" cy="{:.4}" r="{:.4}" fill="#888888" fill-opacity="0.6"/>"##,
            o.center.x, o.center.y, o.radius
        );
    }
    let _ = writeln!(
        out,
        r##"<circle class="goal" cx="{:.4}" cy="{:.4}" r="0.3" fill="none" stroke="#d62728" stroke-width="0.04"/>"##,
        env.goal.x, env.goal.y
    );
    for l in 0..2 {
        polyline(&mut out, record.leaders.iter().map(|p| p[l]), "#ff7f0e", 0.02, r#" stroke-dasharray="0.08 0.04""#);
    }
    let nf = record.followers.first().map_or(0, |f| f.len());
    for i in 0..nf {
        let color = FOLLOWER_COLORS[i % FOLLOWER_COLORS.len()];
        polyline(&mut out, record.followers.iter().map(|f| f[i]), color, 0.02, "");
    }
    polyline(&mut out, record.states.iter().map(|s| [s[0], s[1]]), "#1f77b4", 0.04, r#" class="midpoint""#);
    if let (Some(a), Some(b)) = (record.states.first(), record.states.last()) {
        let _ = writeln!(out, r##"<rect class="start" x="{:.4}" y="{:.4}" width="0.16" height="0.16" fill="#1f77b4"/>"##, a[0] - 0.08, a[1] - 0.08);
        let _ = writeln!(out, r##"<rect class="end" x="{:.4}" y="{:.4}" width="0.16" height="0.16" fill="#17becf"/>"##, b[0] - 0.08, b[1] - 0.08);
    }
    out.push_str("</g>\n</svg>\n");
    out
}

pub fn render_svg(record: &EpisodeRecord, env: &Environment, path: &Path) -> Result<()> {
    std::fs::write(path, svg_string(record, env))?;
    Ok(())
}

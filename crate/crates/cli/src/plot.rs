use std::collections::BTreeSet;
use std::fmt::Write;

use novelty_sac::env::{GeometryExport, Rect};

const SIZE: f64 = 640.0;
const MARGIN: f64 = 20.0;
const LEGEND: f64 = 160.0;

/// A polyline in world coordinates with the controller or policy tag that
/// picks its colour.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub tag: String,
    pub points: Vec<[f64; 2]>,
    /// Drawn dashed; used for checkpoint restores.
    pub jump: bool,
}

fn colour(tag: &str) -> &'static str {
    const CONTINGENCY: [&str; 5] = ["#e67e22", "#27ae60", "#8e44ad", "#16a085", "#d35400"];
    match tag {
        "optimal" => "#2471a3",
        "random" => "#7f8c8d",
        "backtrack" => "#c0392b",
        t => match t.strip_prefix("contingency_").and_then(|j| j.parse::<usize>().ok()) {
            Some(j) if j >= 2 => CONTINGENCY[(j - 2) % CONTINGENCY.len()],
            _ => "#34495e",
        },
    }
}

struct Frame {
    x0: f64,
    y0: f64,
    scale: f64,
}

impl Frame {
    fn new(bounds: &Rect) -> Self {
        let w = (bounds.x1 - bounds.x0).max(bounds.y1 - bounds.y0);
        Self {
            x0: bounds.x0,
            y0: bounds.y0,
            scale: (SIZE - 2.0 * MARGIN) / w,
        }
    }

    fn x(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) * self.scale
    }

    /// World y points up, SVG y points down.
    fn y(&self, y: f64) -> f64 {
        SIZE - MARGIN - (y - self.y0) * self.scale
    }

    fn rect(&self, out: &mut String, r: &Rect, style: &str) {
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" {style}/>"#,
            self.x(r.x0),
            self.y(r.y1),
            (r.x1 - r.x0) * self.scale,
            (r.y1 - r.y0) * self.scale
        );
    }
}

/// Renders geometry and segments as a standalone SVG document. Output
/// depends only on the inputs.
pub fn render_svg(geometry: &GeometryExport, segments: &[Segment], title: &str) -> String {
    let g = &geometry.geometry;
    let f = Frame::new(&g.bounds);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{SIZE}" viewBox="0 0 {w} {SIZE}">"#,
        w = SIZE + LEGEND
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{}" height="{SIZE}" fill="white"/>"#, SIZE + LEGEND);
    f.rect(&mut out, &g.bounds, r##"fill="#fbfcfc" stroke="#222" stroke-width="2""##);
    for w in &g.walls {
        f.rect(&mut out, w, r##"fill="#566573""##);
    }
    for c in &geometry.active_blockades {
        f.rect(&mut out, &g.blockade_slots[c.index()], r##"fill="#c0392b" fill-opacity="0.85""##);
    }
    let _ = writeln!(
        out,
        r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#58d68d" fill-opacity="0.6" stroke="#1e8449"/>"##,
        f.x(g.goal_center[0]),
        f.y(g.goal_center[1]),
        g.goal_radius * f.scale
    );
    let _ = writeln!(
        out,
        r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#222"/>"##,
        f.x(g.start[0]),
        f.y(g.start[1])
    );

    let mut tags = BTreeSet::new();
    for s in segments {
        if s.points.len() < 2 {
            continue;
        }
        tags.insert(s.tag.as_str());
        let mut pts = String::new();
        for (i, p) in s.points.iter().enumerate() {
            if i > 0 {
                pts.push(' ');
            }
            let _ = write!(pts, "{:.2},{:.2}", f.x(p[0]), f.y(p[1]));
        }
        let dash = if s.jump { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{pts}" fill="none" stroke="{}" stroke-width="1.2" stroke-opacity="0.55"{dash}/>"#,
            colour(&s.tag)
        );
    }

    for (i, tag) in tags.iter().enumerate() {
        let y = MARGIN + 10.0 + 22.0 * i as f64;
        let x = SIZE + 8.0;
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="3"/>"#,
            x + 24.0,
            colour(tag)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            x + 30.0,
            y + 4.0,
            escape(tag)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

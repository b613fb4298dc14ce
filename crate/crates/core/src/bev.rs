//! Bird's-eye-view SVG plots of ground-truth and predicted boxes.

use std::fmt::Write as _;

use crate::geometry::Box3d;
use crate::kitti::KittiLabel;

pub const GRID_SPACING_M: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevView {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub pixels_per_meter: f64,
}

impl Default for BevView {
    fn default() -> Self {
        BevView {
            x_min: -30.0,
            x_max: 30.0,
            z_min: 0.0,
            z_max: 70.0,
            pixels_per_meter: 10.0,
        }
    }
}

impl BevView {
    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min) * self.pixels_per_meter
    }

    pub fn height(&self) -> f64 {
        (self.z_max - self.z_min) * self.pixels_per_meter
    }

    /// Camera `(x, z)` to SVG pixels; forward is up.
    pub fn to_svg(&self, x: f64, z: f64) -> (f64, f64) {
        (
            (x - self.x_min) * self.pixels_per_meter,
            (self.z_max - z) * self.pixels_per_meter,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    GroundTruth,
    Prediction,
}

impl Role {
    fn style(self) -> &'static str {
        match self {
            Role::GroundTruth => r##"stroke="#1a9641" stroke-width="2" fill="none""##,
            Role::Prediction => r##"stroke="#d7191c" stroke-width="1.5" stroke-dasharray="4 3" fill="none""##,
        }
    }

    fn class(self) -> &'static str {
        match self {
            Role::GroundTruth => "gt",
            Role::Prediction => "pred",
        }
    }
}

fn push_box(svg: &mut String, view: &BevView, b: &Box3d, role: Role, score: Option<f64>) {
    let corners = b.bev_corners();
    let pts: Vec<String> = corners
        .iter()
        .map(|&(x, z)| {
            let (u, v) = view.to_svg(x, z);
            format!("{u:.1},{v:.1}")
        })
        .collect();
    writeln!(
        svg,
        r#"  <polygon class="{}" points="{}" {}/>"#,
        role.class(),
        pts.join(" "),
        role.style()
    )
    .expect("write to string");
    // Heading tick from the center to the middle of the front face.
    let (hx, hz) = (b.x + 0.5 * b.l * b.ry.cos(), b.z - 0.5 * b.l * b.ry.sin());
    let (u0, v0) = view.to_svg(b.x, b.z);
    let (u1, v1) = view.to_svg(hx, hz);
    writeln!(
        svg,
        r#"  <line class="{}-heading" x1="{u0:.1}" y1="{v0:.1}" x2="{u1:.1}" y2="{v1:.1}" {}/>"#,
        role.class(),
        role.style()
    )
    .expect("write to string");
    if let Some(s) = score {
        writeln!(
            svg,
            r##"  <text x="{:.1}" y="{:.1}" font-size="10" fill="#d7191c">{s:.2}</text>"##,
            u1 + 3.0,
            v1
        )
        .expect("write to string");
    }
}

/// An SVG document with a 10 m grid, ground truth drawn solid and predictions dashed.
pub fn render_svg(view: &BevView, gts: &[KittiLabel], preds: &[KittiLabel]) -> String {
    let (w, h) = (view.width(), view.height());
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    )
    .expect("write to string");
    writeln!(svg, r#"  <rect width="100%" height="100%" fill="white"/>"#).expect("write to string");
    let first = |lo: f64| (lo / GRID_SPACING_M).ceil() * GRID_SPACING_M;
    let mut x = first(view.x_min);
    while x <= view.x_max {
        let (u, _) = view.to_svg(x, view.z_min);
        writeln!(
            svg,
            r##"  <line class="grid" x1="{u:.1}" y1="0" x2="{u:.1}" y2="{h:.1}" stroke="#dddddd" stroke-width="1"/>"##
        )
        .expect("write to string");
        x += GRID_SPACING_M;
    }
    let mut z = first(view.z_min);
    while z <= view.z_max {
        let (_, v) = view.to_svg(view.x_min, z);
        writeln!(
            svg,
            r##"  <line class="grid" x1="0" y1="{v:.1}" x2="{w:.1}" y2="{v:.1}" stroke="#dddddd" stroke-width="1"/>"##
        )
        .expect("write to string");
        writeln!(
            svg,
            r##"  <text x="2" y="{:.1}" font-size="9" fill="#888888">{z:.0} m</text>"##,
            v - 2.0
        )
        .expect("write to string");
        z += GRID_SPACING_M;
    }
    let (cu, cv) = view.to_svg(0.0, 0.0);
    writeln!(svg, r#"  <circle class="camera" cx="{cu:.1}" cy="{cv:.1}" r="4" fill="black"/>"#)
        .expect("write to string");
    for l in gts.iter().filter(|l| !l.is_dont_care()) {
        push_box(&mut svg, view, &l.box3d(), Role::GroundTruth, None);
    }
    for l in preds.iter().filter(|l| !l.is_dont_care()) {
        push_box(&mut svg, view, &l.box3d(), Role::Prediction, l.score);
    }
    svg.push_str("</svg>\n");
    svg
}

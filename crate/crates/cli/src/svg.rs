//! SVG figures of parameter and physical meshes, with optional overlays of
//! a pending refinement pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anisoline::iga::Geometry;
use anisoline::mesh::{CellId, Split, TMesh};
use anisoline::refine::RefinementReport;

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 20.0;
const LEVEL_COLORS: [&str; 8] = ["#f7fbff", "#deebf7", "#c6dbef", "#9ecae1", "#6baed6", "#4292c6", "#2171b5", "#08519c"];
const GROUP_COLORS: [&str; 6] = ["#e41a1c", "#4daf4a", "#984ea3", "#ff7f00", "#a65628", "#f781bf"];

pub fn level_color(level: u32) -> &'static str {
    LEVEL_COLORS[(level as usize).min(LEVEL_COLORS.len() - 1)]
}

struct Canvas {
    x0: f64,
    y1: f64,
    scale: f64,
    width: f64,
    height: f64,
}

impl Canvas {
    fn fit(bbox: [f64; 4]) -> Canvas {
        let [x0, x1, y0, y1] = bbox;
        let scale = WIDTH / (x1 - x0).max(y1 - y0);
        Canvas { x0, y1, scale, width: (x1 - x0) * scale + 2.0 * MARGIN, height: (y1 - y0) * scale + 2.0 * MARGIN }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (MARGIN + (x - self.x0) * self.scale, MARGIN + (self.y1 - y) * self.scale)
    }

    fn open(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#,
            w = self.width,
            h = self.height
        );
        let _ = writeln!(s, "<title>{}</title>", escape(title));
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overlay of one refinement pass drawn on the mesh it was applied to.
pub struct Overlay<'a> {
    pub report: &'a RefinementReport,
    /// Labels as requested, to show relabelled cells as `H>C`.
    pub requested: Option<&'a BTreeMap<CellId, Split>>,
}

/// One rectangle per active cell, filled by level. With an overlay, group
/// members are outlined in their group colour, split lines are dashed and
/// labels are printed at the cell centres. `ids` prints cell ids in the
/// lower left corners.
pub fn parameter_mesh(mesh: &TMesh, title: &str, overlay: Option<&Overlay>, ids: bool) -> String {
    let cv = Canvas::fit(mesh.domain());
    let mut s = cv.open(title);
    s.push_str("<g stroke=\"#222\" stroke-width=\"1\">\n");
    for c in mesh.active_cells() {
        let [s0, s1, t0, t1] = mesh.cell_rect(c);
        let (x, y) = cv.px(s0, t1);
        let (x1, y1) = cv.px(s1, t0);
        let _ = writeln!(
            s,
            r#"<rect id="cell{c}" x="{x:.3}" y="{y:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
            x1 - x,
            y1 - y,
            level_color(mesh.cells()[c].level)
        );
    }
    s.push_str("</g>\n");
    if ids {
        s.push_str("<g class=\"ids\" font-family=\"monospace\" font-size=\"9\" fill=\"#666\">\n");
        for c in mesh.active_cells() {
            let [s0, _, t0, _] = mesh.cell_rect(c);
            let (x, y) = cv.px(s0, t0);
            let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}">{c}</text>"#, x + 3.0, y - 3.0);
        }
        s.push_str("</g>\n");
    }
    if let Some(ov) = overlay {
        for g in &ov.report.groups {
            let color = GROUP_COLORS[g.id % GROUP_COLORS.len()];
            let _ = writeln!(s, r#"<g class="group" data-group="{}" fill="none" stroke="{color}" stroke-width="3">"#, g.id);
            for &c in &g.cells {
                let [s0, s1, t0, t1] = mesh.cell_rect(c);
                let (x, y) = cv.px(s0, t1);
                let (x1, y1) = cv.px(s1, t0);
                let _ = writeln!(s, r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}"/>"#, x + 2.0, y + 2.0, x1 - x - 4.0, y1 - y - 4.0);
            }
            s.push_str("</g>\n");
        }
        s.push_str("<g class=\"candidates\" stroke=\"#d62728\" stroke-width=\"1.5\" stroke-dasharray=\"6,4\">\n");
        for (&c, &split) in &ov.report.final_labels {
            let [s0, s1, t0, t1] = mesh.cell_rect(c);
            let (sm, tm) = (0.5 * (s0 + s1), 0.5 * (t0 + t1));
            if split.splits_t() {
                let (a, b) = (cv.px(s0, tm), cv.px(s1, tm));
                let _ = writeln!(s, r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#, a.0, a.1, b.0, b.1);
            }
            if split.splits_s() {
                let (a, b) = (cv.px(sm, t0), cv.px(sm, t1));
                let _ = writeln!(s, r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#, a.0, a.1, b.0, b.1);
            }
        }
        s.push_str("</g>\n");
        s.push_str("<g class=\"labels\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\" fill=\"#000\">\n");
        for (&c, &split) in &ov.report.final_labels {
            let [s0, s1, t0, t1] = mesh.cell_rect(c);
            let (x, y) = cv.px(0.5 * (s0 + s1), 0.5 * (t0 + t1));
            let text = match ov.requested.and_then(|r| r.get(&c)) {
                Some(&r) if r != split => format!("{r}>{split}"),
                _ => split.to_string(),
            };
            let _ = writeln!(s, r#"<text x="{x:.3}" y="{:.3}">{text}</text>"#, y - 4.0);
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Mapped cells as closed paths through `4 * edge_samples` boundary points.
pub fn physical_mesh(geometry: &Geometry, title: &str, edge_samples: usize) -> String {
    let mesh = geometry.space().mesh();
    let n = edge_samples.max(1);
    let mut polys = Vec::new();
    let mut bbox = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for c in mesh.active_cells() {
        let [s0, s1, t0, t1] = mesh.cell_rect(c);
        let mut params = Vec::with_capacity(4 * n);
        for k in 0..n {
            let a = k as f64 / n as f64;
            params.push((s0 + a * (s1 - s0), t0));
        }
        for k in 0..n {
            let a = k as f64 / n as f64;
            params.push((s1, t0 + a * (t1 - t0)));
        }
        for k in 0..n {
            let a = k as f64 / n as f64;
            params.push((s1 - a * (s1 - s0), t1));
        }
        for k in 0..n {
            let a = k as f64 / n as f64;
            params.push((s0, t1 - a * (t1 - t0)));
        }
        let pts: Vec<(f64, f64)> = params
            .iter()
            .map(|&(s, t)| {
                let x = geometry.field.derivatives_in_cell(c, s, t)[0];
                (x.x, x.y)
            })
            .collect();
        for &(x, y) in &pts {
            bbox = [bbox[0].min(x), bbox[1].max(x), bbox[2].min(y), bbox[3].max(y)];
        }
        polys.push((c, pts));
    }
    if !(bbox[1] > bbox[0]) {
        bbox = [0.0, 1.0, bbox[2], bbox[3]];
    }
    if !(bbox[3] > bbox[2]) {
        bbox = [bbox[0], bbox[1], 0.0, 1.0];
    }
    let cv = Canvas::fit(bbox);
    let mut s = cv.open(title);
    s.push_str("<g stroke=\"#222\" stroke-width=\"1\">\n");
    for (c, pts) in polys {
        let mut d = String::new();
        for (k, &(x, y)) in pts.iter().enumerate() {
            let (px, py) = cv.px(x, y);
            let _ = write!(d, "{}{px:.3},{py:.3} ", if k == 0 { "M" } else { "L" });
        }
        d.push('Z');
        let _ = writeln!(s, r#"<path id="cell{c}" d="{d}" fill="{}"/>"#, level_color(mesh.cells()[c].level));
    }
    s.push_str("</g>\n</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use anisoline::refine::{refine, RefinementRequest};
    use anisoline::space::SplineSpace;
    use std::sync::Arc;

    #[test]
    fn one_rect_per_active_cell() {
        let m = TMesh::tensor(3, 2, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let svg = parameter_mesh(&m, "grid", None, false);
        assert_eq!(svg.matches("<rect id=\"cell").count(), 6);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn overlay_marks_groups_and_relabels() {
        let m = TMesh::tensor(3, 3, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let req = BTreeMap::from([(4, Split::H)]);
        let (_, rep) = refine(&m, &RefinementRequest::new(req.clone())).unwrap();
        let svg = parameter_mesh(&m, "pass", Some(&Overlay { report: &rep, requested: Some(&req) }), true);
        assert_eq!(svg.matches("class=\"group\"").count(), 1);
        assert!(svg.contains(">H>C<"));
        assert_eq!(svg.matches("<line").count(), 2);
    }

    #[test]
    fn physical_mesh_has_paths() {
        let space = Arc::new(SplineSpace::new(TMesh::tensor(2, 2, [0.0, 1.0, 0.0, 1.0]).unwrap()).unwrap());
        let g = Geometry::identity(space).unwrap();
        let svg = physical_mesh(&g, "square", 4);
        assert_eq!(svg.matches("<path").count(), 4);
    }
}

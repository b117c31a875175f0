//! SVG play diagrams: one panel per sample, offense moving right, lines
//! thinning from start to end, circles at the start and diamonds at the end.

use std::fmt::Write as _;

use formgen_core::dataio::Role;

const PX_PER_YARD: f64 = 10.0;
const PAD_YARDS: f64 = 3.0;
const PANEL_GAP: f64 = 20.0;
const START_WIDTH: f64 = 3.5;
const END_WIDTH: f64 = 0.6;

pub fn role_color(role: Role) -> &'static str {
    match role {
        Role::QB => "#d62728",
        Role::RB | Role::FB => "#17a2a2",
        Role::WR => "#1f77b4",
        Role::TE => "#ff7f0e",
        Role::C | Role::G | Role::T => "#7f7f7f",
    }
}

/// One labelled play, `[T][N][x, y]` in yards.
pub struct Panel<'a> {
    pub title: String,
    pub trajectory: &'a [Vec<[f64; 2]>],
}

fn bounds(panels: &[Panel<'_>]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in panels.iter().flat_map(|p| p.trajectory.iter().flatten()) {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    }
    if !b[0].is_finite() {
        return [0.0, 0.0, 1.0, 1.0];
    }
    [b[0] - PAD_YARDS, b[1] - PAD_YARDS, b[2] + PAD_YARDS, b[3] + PAD_YARDS]
}

/// Renders every panel side by side on a shared scale.
pub fn render_svg(panels: &[Panel<'_>], roles: &[Role]) -> String {
    let [x0, y0, x1, y1] = bounds(panels);
    let w = (x1 - x0) * PX_PER_YARD;
    let h = (y1 - y0) * PX_PER_YARD;
    let title_h = 24.0;
    let total_w = panels.len() as f64 * (w + PANEL_GAP) + PANEL_GAP;
    let total_h = h + title_h + 2.0 * PANEL_GAP;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.1}" height="{total_h:.1}" viewBox="0 0 {total_w:.1} {total_h:.1}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (pi, panel) in panels.iter().enumerate() {
        let ox = PANEL_GAP + pi as f64 * (w + PANEL_GAP);
        let oy = PANEL_GAP + title_h;
        // Field y grows upward on the page.
        let px = |p: [f64; 2]| (ox + (p[0] - x0) * PX_PER_YARD, oy + (y1 - p[1]) * PX_PER_YARD);
        let _ = writeln!(s, r#"<g id="panel-{pi}">"#);
        let _ = writeln!(
            s,
            r##"<rect x="{ox:.2}" y="{oy:.2}" width="{w:.2}" height="{h:.2}" fill="#f3f8f0" stroke="#9aa79a"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="14">{}</text>"#,
            ox,
            oy - 8.0,
            escape(&panel.title)
        );
        let mut yard = (x0 / 5.0).ceil() * 5.0;
        while yard <= x1 {
            let (gx, _) = px([yard, 0.0]);
            let _ = writeln!(
                s,
                r##"<line x1="{gx:.2}" y1="{oy:.2}" x2="{gx:.2}" y2="{:.2}" stroke="#dde5dd" stroke-width="1"/>"##,
                oy + h
            );
            yard += 5.0;
        }
        let traj = panel.trajectory;
        let frames = traj.len();
        for (i, role) in roles.iter().enumerate() {
            let color = role_color(*role);
            for t in 1..frames {
                let frac = (t - 1) as f64 / frames.saturating_sub(2).max(1) as f64;
                let width = START_WIDTH + (END_WIDTH - START_WIDTH) * frac;
                let (ax, ay) = px(traj[t - 1][i]);
                let (bx, by) = px(traj[t][i]);
                let _ = writeln!(
                    s,
                    r#"<line x1="{ax:.2}" y1="{ay:.2}" x2="{bx:.2}" y2="{by:.2}" stroke="{color}" stroke-width="{width:.2}" stroke-linecap="round"/>"#
                );
            }
            let (sx, sy) = px(traj[0][i]);
            let _ = writeln!(
                s,
                r##"<circle cx="{sx:.2}" cy="{sy:.2}" r="4" fill="{color}" stroke="#000000" stroke-width="0.5"><title>{}</title></circle>"##,
                role.name()
            );
            if frames > 1 {
                let (ex, ey) = px(traj[frames - 1][i]);
                let d = 4.5;
                let _ = writeln!(
                    s,
                    r##"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}" stroke="#000000" stroke-width="0.5"/>"##,
                    ex,
                    ey - d,
                    ex + d,
                    ey,
                    ex,
                    ey + d,
                    ex - d,
                    ey
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

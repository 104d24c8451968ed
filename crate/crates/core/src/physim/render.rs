use std::fmt::Write;

use super::dynamics::{axis, kinematics, SimState};
use super::model::BodyModel;
use super::SimError;

const FRAME_WIDTH: f64 = 160.0;
const FRAME_HEIGHT: f64 = 200.0;
const PX_PER_M: f64 = 120.0;
const GROUND_Y: f64 = 180.0;
const GHOST_OPACITY: f64 = 0.35;

fn figure(out: &mut String, model: &BodyModel, s: &SimState, origin_x: f64, shift: f64, color: &str, opacity: f64) {
    let k = kinematics(model, s);
    let px = |p: [f64; 2]| (origin_x + (p[0] - shift) * PX_PER_M, GROUND_Y - p[1] * PX_PER_M);
    let _ = writeln!(out, r#"<g stroke="{color}" fill="{color}" stroke-width="3" opacity="{opacity}">"#);
    for (l, link) in model.links().iter().enumerate() {
        let a = k.base[l];
        let u = axis(k.angle[l]);
        let b = [a[0] + link.length * u[0], a[1] + link.length * u[1]];
        let segments: Vec<([f64; 2], [f64; 2])> = if link.contacts.len() >= 2 {
            let pts: Vec<[f64; 2]> = link.contacts.iter().map(|&c| k.point(l, c)).collect();
            let mut segs: Vec<_> = pts.windows(2).map(|w| (w[0], w[1])).collect();
            segs.push((a, pts[0]));
            segs.push((a, pts[pts.len() - 1]));
            segs
        } else {
            vec![(a, b)]
        };
        for (p, q) in segments {
            let (x1, y1) = px(p);
            let (x2, y2) = px(q);
            let _ = writeln!(out, r#"  <line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}"/>"#);
        }
        if l == model.root() {
            let (cx, cy) = px(b);
            let _ = writeln!(out, r#"  <circle cx="{cx:.2}" cy="{cy:.2}" r="9"/>"#);
        }
    }
    let _ = writeln!(out, "</g>");
}

/// Stick-figure frames laid out left to right. When `reference` is given,
/// its frames are drawn underneath in grey at reduced opacity; both figures
/// in a frame share the generated state's horizontal offset.
pub fn render_svg(states: &[SimState], model: &BodyModel, reference: Option<&[SimState]>) -> Result<String, SimError> {
    if states.is_empty() {
        return Err(SimError::EmptySequence);
    }
    let width = FRAME_WIDTH * states.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{FRAME_HEIGHT}" viewBox="0 0 {width} {FRAME_HEIGHT}">"#
    );
    let _ = writeln!(
        out,
        r##"<line x1="0" y1="{GROUND_Y}" x2="{width}" y2="{GROUND_Y}" stroke="#444" stroke-width="1"/>"##
    );
    for (i, s) in states.iter().enumerate() {
        let origin = FRAME_WIDTH * (i as f64 + 0.5);
        let shift = s.root_pos[0];
        if let Some(ghost) = reference.and_then(|r| r.get(i)) {
            figure(&mut out, model, ghost, origin, shift, "#888888", GHOST_OPACITY);
        }
        figure(&mut out, model, s, origin, shift, "#b5651d", 1.0);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

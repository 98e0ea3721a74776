//! Joint CSV and SVG plot exports of a generated motion.

use std::fmt::Write as _;

use motionlab::motion_data::{to_joint_positions, JointTrajectory};
use motionlab::{MotionSequence32, Result};

pub fn joints(motion: &MotionSequence32) -> Result<JointTrajectory<f32>> {
    to_joint_positions(motion)
}

/// One `x,y,z` row per frame and joint, frame-major.
pub fn joints_csv(traj: &JointTrajectory<f32>) -> String {
    let mut out = String::new();
    for f in 0..traj.frames() {
        for j in 0..traj.joints {
            let [x, y, z] = traj.joint(f, j);
            let _ = writeln!(out, "{x},{y},{z}");
        }
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PANEL: f64 = 360.0;
const MARGIN: f64 = 30.0;

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-6 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn polyline(out: &mut String, points: &[(f64, f64)], color: &str) {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
}

/// Top view of the root path (left) and joint heights over time (right).
pub fn plot_svg(traj: &JointTrajectory<f32>, title: &str) -> String {
    let n = traj.frames();
    let width = 2.0 * PANEL + 3.0 * MARGIN;
    let height = PANEL + 2.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="18">{title}</text>"#);

    // Equal axis scale so the path shape is not distorted.
    let root: Vec<(f64, f64)> = (0..n).map(|f| traj.joint(f, 0)).map(|p| (p[0] as f64, p[2] as f64)).collect();
    let (x0, x1) = bounds(root.iter().map(|p| p.0));
    let (z0, z1) = bounds(root.iter().map(|p| p.1));
    let span = (x1 - x0).max(z1 - z0);
    let left: Vec<(f64, f64)> = root
        .iter()
        .map(|&(x, z)| (MARGIN + (x - x0) / span * PANEL, MARGIN + PANEL - (z - z0) / span * PANEL))
        .collect();
    let _ = writeln!(out, r##"<rect x="{MARGIN}" y="{MARGIN}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/>"##);
    let _ = writeln!(out, r#"<text x="{}" y="{}">root path (x, z)</text>"#, MARGIN + 4.0, MARGIN + 14.0);
    polyline(&mut out, &left, PALETTE[0]);

    let ox = 2.0 * MARGIN + PANEL;
    let (y0, y1) = bounds((0..n).flat_map(|f| (0..traj.joints).map(move |j| (f, j))).map(|(f, j)| traj.joint(f, j)[1] as f64));
    let _ = writeln!(out, r##"<rect x="{ox}" y="{MARGIN}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/>"##);
    let _ = writeln!(out, r#"<text x="{}" y="{}">joint height over frames</text>"#, ox + 4.0, MARGIN + 14.0);
    let step = PANEL / (n.max(2) - 1) as f64;
    for j in 0..traj.joints {
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|f| (ox + f as f64 * step, MARGIN + PANEL - (traj.joint(f, j)[1] as f64 - y0) / (y1 - y0) * PANEL))
            .collect();
        polyline(&mut out, &pts, PALETTE[j % PALETTE.len()]);
    }
    out.push_str("</svg>\n");
    out
}

use std::fmt::Write;

use nalgebra::Vector3;

/// Top-down (x, y) SVG of the estimate, optional ground truth, and loop
/// edges as segments between estimated positions.
pub fn trajectory_svg(est: &[Vector3<f64>], gt: Option<&[Vector3<f64>]>, loops: &[(Vector3<f64>, Vector3<f64>)]) -> String {
    let all = est.iter().chain(gt.into_iter().flatten());
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in all {
        lo = (lo.0.min(p.x), lo.1.min(p.y));
        hi = (hi.0.max(p.x), hi.1.max(p.y));
    }
    if !lo.0.is_finite() {
        lo = (0.0, 0.0);
        hi = (1.0, 1.0);
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-6);
    let (size, margin) = (800.0, 20.0);
    let scale = (size - 2.0 * margin) / span;
    // SVG y grows downward.
    let xy = |p: &Vector3<f64>| (margin + (p.x - lo.0) * scale, size - margin - (p.y - lo.1) * scale);
    let poly = |pts: &[Vector3<f64>]| {
        pts.iter()
            .map(|p| {
                let (x, y) = xy(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(g) = gt {
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#999" stroke-width="2"/>"##,
            poly(g)
        );
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f5fbf" stroke-width="1.5"/>"##,
        poly(est)
    );
    for (a, b) in loops {
        let ((x1, y1), (x2, y2)) = (xy(a), xy(b));
        let _ = writeln!(
            s,
            r##"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#d02020" stroke-width="1"/>"##
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{margin}" y="{}" font-family="sans-serif" font-size="12">{:.1} m</text>"#,
        margin,
        span
    );
    s.push_str("</svg>\n");
    s
}

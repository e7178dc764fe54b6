//! Minimal SVG line plot for the memory-size sweep.

use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub cells: usize,
    pub mean: f64,
    pub std: f64,
}

const W: f64 = 520.0;
const H: f64 = 340.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;

/// Mean validation F1 against memory size with ±1 std error bars.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    let lo = points.iter().map(|p| p.cells).min().unwrap_or(0) as f64;
    let hi = points.iter().map(|p| p.cells).max().unwrap_or(1) as f64;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |c: usize| LEFT + (c as f64 - lo) / span * (W - LEFT - RIGHT);
    let y = |v: f64| TOP + (1.0 - v.clamp(0.0, 1.0)) * (H - TOP - BOTTOM);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    writeln!(s, r#"<path d="M{x0} {y0}V{y1}H{x1}" fill="none" stroke="black"/>"#).unwrap();
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let yy = y(v);
        writeln!(s, r##"<line x1="{x0}" y1="{yy:.2}" x2="{x1}" y2="{yy:.2}" stroke="#eee"/>"##).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, x0 - 6.0, yy + 4.0).unwrap();
    }
    for p in points {
        let xx = x(p.cells);
        writeln!(s, r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y1 + 16.0, p.cells).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">memory cells N</text>"#, (x0 + x1) / 2.0, H - 10.0).unwrap();
    writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">validation F1</text>"#,
        (y0 + y1) / 2.0
    )
    .unwrap();

    let path: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", x(p.cells), y(p.mean))).collect();
    if !path.is_empty() {
        writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>"##, path.join(" ")).unwrap();
    }
    for p in points {
        let xx = x(p.cells);
        let (ya, yb) = (y(p.mean - p.std), y(p.mean + p.std));
        writeln!(s, r##"<path d="M{xx:.2} {ya:.2}V{yb:.2}M{:.2} {ya:.2}h8M{:.2} {yb:.2}h8" stroke="#1f5fa8"/>"##, xx - 4.0, xx - 4.0).unwrap();
        writeln!(
            s,
            r##"<circle cx="{xx:.2}" cy="{:.2}" r="3" fill="#1f5fa8" data-mean="{:.4}" data-std="{:.4}"/>"##,
            y(p.mean),
            p.mean,
            p.std
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

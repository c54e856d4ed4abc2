//! Static SVG charts written by hand. Output depends only on the inputs, so
//! repeated runs produce identical files.

use std::fmt::Write;

pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: Option<String>,
}

pub struct Series {
    pub name: String,
    pub color: &'static str,
    pub radius: f64,
    pub points: Vec<Point>,
}

const W: f64 = 560.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(0.01);
    ((lo - pad).max(0.0), (hi + pad).min(1.0).max(lo + pad))
}

/// Scatter plot with one colour per series and a legend.
pub fn scatter(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.x)));
    let (y0, y1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.y)));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    )
    .unwrap();
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, px(xv), H - MARGIN + 16.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, MARGIN - 6.0, py(yv) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 18.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
    for ser in series {
        for p in ser.points.iter().filter(|p| p.x.is_finite() && p.y.is_finite()) {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{}" fill="{}" fill-opacity="0.75"/>"#,
                px(p.x),
                py(p.y),
                ser.radius,
                ser.color
            )
            .unwrap();
            if let Some(l) = &p.label {
                writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, px(p.x) + ser.radius + 3.0, py(p.y) - 3.0, escape(l)).unwrap();
            }
        }
    }
    for (i, ser) in series.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        writeln!(s, r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/>"#, W - MARGIN - 110.0, ser.color).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - MARGIN - 100.0, y + 4.0, escape(&ser.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Grid of cells in [0, 1], white to dark red, with the value printed in
/// each cell when there is room.
pub fn heatmap(title: &str, row_labels: &[&str], col_labels: &[String], values: &[Vec<f64>]) -> String {
    let cell = (720.0 / col_labels.len().max(1) as f64).clamp(8.0, 48.0);
    let left = 90.0;
    let top = 50.0;
    let label_band = 120.0;
    let width = left + cell * col_labels.len() as f64 + 20.0;
    let height = top + cell * row_labels.len() as f64 + label_band;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="10">"#).unwrap();
    writeln!(s, r#"<rect width="{width:.0}" height="{height:.0}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{left}" y="24" font-size="14">{}</text>"#, escape(title)).unwrap();
    for (r, label) in row_labels.iter().enumerate() {
        let y = top + cell * r as f64;
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, y + cell / 2.0 + 4.0, escape(label)).unwrap();
        for (c, v) in values[r].iter().enumerate() {
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            let x = left + cell * c as f64;
            let g = (255.0 * (1.0 - v)).round() as u8;
            let b = (255.0 * (1.0 - v) * 0.9).round() as u8;
            writeln!(
                s,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="#ff{g:02x}{b:02x}" stroke="#cccccc"/>"##
            )
            .unwrap();
            if cell >= 28.0 {
                writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{v:.2}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 3.0
                )
                .unwrap();
            }
        }
    }
    let base = top + cell * row_labels.len() as f64 + 6.0;
    for (c, label) in col_labels.iter().enumerate() {
        let x = left + cell * c as f64 + cell / 2.0;
        let short: String = label.chars().take(18).collect();
        writeln!(
            s,
            r#"<text x="{x:.1}" y="{base:.1}" text-anchor="end" transform="rotate(-60 {x:.1} {base:.1})">{}</text>"#,
            escape(&short)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_wellformed_and_escaped() {
        let svg = scatter(
            "a<b",
            "x",
            "y",
            &[Series {
                name: "s&t".into(),
                color: "red",
                radius: 3.0,
                points: vec![Point { x: 0.5, y: 0.2, label: Some("p".into()) }, Point { x: f64::NAN, y: 0.1, label: None }],
            }],
        );
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b") && svg.contains("s&amp;t"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn heatmap_cells() {
        let svg = heatmap("h", &["target", "sensitive"], &["a".into(), "b".into(), "c".into()], &[vec![0.0, 0.5, 1.0], vec![1.0, 0.0, 0.2]]);
        assert_eq!(svg.matches("<rect x=").count(), 6);
        assert!(svg.contains("#ff0000"));
        assert!(svg.contains("#ffffe6"));
    }
}

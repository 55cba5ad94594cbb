//! Minimal SVG charts: a scatter plot and a multi-series polyline chart.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const MAX_POLYLINE_POINTS: usize = 600;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = (f64::INFINITY, f64::NEG_INFINITY);
        for &(px, py) in points.filter(|(a, b)| a.is_finite() && b.is_finite()) {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let widen = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            x: widen(x),
            y: widen(y),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(svg: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    let label = |v: f64| format!("{v:.3e}");
    let _ = writeln!(
        svg,
        r#"<g font-family="sans-serif" font-size="11"><text x="{l}" y="{}">{}</text><text x="{r}" y="{}" text-anchor="end">{}</text><text x="{}" y="{b}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="end">{}</text></g>"#,
        b + 16.0,
        label(frame.x.0),
        b + 16.0,
        label(frame.x.1),
        l - 4.0,
        label(frame.y.0),
        l - 4.0,
        t + 4.0,
        label(frame.y.1)
    );
    let _ = writeln!(
        svg,
        r#"<g font-family="sans-serif" font-size="12"><text x="{}" y="{}" text-anchor="middle">{}</text><text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text></g>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Points coloured by group; `legend` names each group index.
pub fn scatter(title: &str, points: &[(f64, f64)], groups: &[usize], legend: &[&str]) -> String {
    let frame = Frame::fit(points.iter());
    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, &frame, "t-SNE 1", "t-SNE 2");
    for (&(x, y), &g) in points.iter().zip(groups) {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            frame.px(x),
            frame.py(y),
            PALETTE[g % PALETTE.len()]
        );
    }
    legend_block(&mut svg, legend);
    svg.push_str("</svg>\n");
    svg
}

fn legend_block(svg: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 4.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 150.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            y,
            escape(name)
        );
    }
}

/// Polyline per series. With `log_y`, values are plotted as `log10` and
/// non-positive values are dropped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool) -> String {
    let transformed: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, pts)| {
            let kept: Vec<(f64, f64)> = pts
                .iter()
                .filter(|(_, y)| !log_y || *y > 0.0)
                .map(|&(x, y)| (x, if log_y { y.log10() } else { y }))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            thin(kept)
        })
        .collect();
    let frame = Frame::fit(transformed.iter().flatten());
    let mut svg = String::new();
    open(&mut svg, title);
    let y_label = if log_y { format!("log10 {y_label}") } else { y_label.to_string() };
    axes(&mut svg, &frame, x_label, &y_label);
    for (i, pts) in transformed.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            coords.join(" ")
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend_block(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}

fn thin(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if points.len() <= MAX_POLYLINE_POINTS {
        return points;
    }
    let step = points.len().div_ceil(MAX_POLYLINE_POINTS);
    let last = *points.last().expect("non-empty");
    let mut out: Vec<(f64, f64)> = points.into_iter().step_by(step).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

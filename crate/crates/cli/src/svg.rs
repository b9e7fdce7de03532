//! Hand-written SVG charts. Coordinates are printed with fixed precision
//! so identical inputs give identical bytes.

use std::fmt::Write;

use crate::metrics::fmt_sig;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One x position of an error-bar chart.
#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(f64::EPSILON);
        LEFT + (x - self.x_min) / span * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(f64::EPSILON);
        HEIGHT - BOTTOM - (y - self.y_min) / span * (HEIGHT - TOP - BOTTOM)
    }

    /// Pixels per unit on the y axis.
    fn y_scale(&self) -> f64 {
        (HEIGHT - TOP - BOTTOM) / (self.y_max - self.y_min).max(f64::EPSILON)
    }
}

fn header(out: &mut String, title: &str, notes: &[String]) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    for note in notes {
        let _ = writeln!(out, "<!-- {} -->", note.replace("--", "- -"));
    }
    let _ = writeln!(out, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="28" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str, y_ticks: usize) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    for i in 0..=y_ticks {
        let v = f.y_min + (f.y_max - f.y_min) * i as f64 / y_ticks as f64;
        let y = f.py(v);
        let _ = writeln!(out, r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#e6e6e6"/>"##);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
            x0 - 6.0,
            y + 4.0,
            v
        );
    }
    let _ = writeln!(out, r##"<line x1="{x0:.2}" y1="{y1:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="#333333"/>"##);
    let _ = writeln!(out, r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="#333333"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    // Accuracy-style data: pad to tenths, stay inside [0, 1] when possible.
    let lo = ((lo - 0.02) * 10.0).floor() / 10.0;
    let hi = ((hi + 0.02) * 10.0).ceil() / 10.0;
    let lo = if lo >= -0.1 { lo.max(0.0) } else { lo };
    let hi = if hi <= 1.1 { hi.min(1.0) } else { hi };
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Multi-series line chart with a legend. Notes become XML comments.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], notes: &[String]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (x_min, x_max) = if x_min.is_finite() { (x_min, x_max.max(x_min + 1.0)) } else { (0.0, 1.0) };
    let (y_min, y_max) = y_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let f = Frame {
        x_min,
        x_max,
        y_min,
        y_max,
    };
    let mut out = String::new();
    header(&mut out, title, notes);
    axes(&mut out, &f, x_label, y_label, 5);
    let x_ticks = ((x_max - x_min).round() as usize).clamp(1, 10);
    for i in 0..=x_ticks {
        let v = x_min + (x_max - x_min) * i as f64 / x_ticks as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            f.px(v),
            HEIGHT - BOTTOM + 18.0,
            fmt_sig((v * 100.0).round() / 100.0)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(&s.name),
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                f.px(x),
                f.py(y)
            );
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            out,
            r#"<text class="legend" x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Means joined by a line, with whiskers spanning `mean ± std`.
/// Each whisker carries `data-mean` and `data-std` attributes.
pub fn error_bar_chart(title: &str, x_label: &str, y_label: &str, bars: &[Bar], notes: &[String]) -> String {
    let (y_min, y_max) = y_range(bars.iter().flat_map(|b| [b.mean - b.std, b.mean + b.std]));
    let n = bars.len().max(1);
    let f = Frame {
        x_min: -0.5,
        x_max: n as f64 - 0.5,
        y_min,
        y_max,
    };
    let mut out = String::new();
    header(&mut out, title, notes);
    axes(&mut out, &f, x_label, y_label, 5);
    let color = PALETTE[0];
    let pts: Vec<String> = bars
        .iter()
        .enumerate()
        .map(|(i, b)| format!("{:.2},{:.2}", f.px(i as f64), f.py(b.mean)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
        pts.join(" ")
    );
    for (i, b) in bars.iter().enumerate() {
        let x = f.px(i as f64);
        let (top, bottom) = (f.py(b.mean + b.std), f.py(b.mean - b.std));
        let _ = writeln!(
            out,
            r#"<g class="whisker" data-label="{}" data-mean="{}" data-std="{}" data-px-per-unit="{}">"#,
            escape(&b.label),
            fmt_sig(b.mean),
            fmt_sig(b.std),
            fmt_sig(f.y_scale())
        );
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{top:.4}" x2="{x:.2}" y2="{bottom:.4}" stroke="#333333"/>"##);
        for y in [top, bottom] {
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{y:.4}" x2="{:.2}" y2="{y:.4}" stroke="#333333"/>"##,
                x - 5.0,
                x + 5.0
            );
        }
        let _ = writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
            f.py(b.mean)
        );
        let _ = writeln!(out, "</g>");
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 18.0,
            escape(&b.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

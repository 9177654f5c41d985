//! Minimal self-contained SVG charts on a fixed 800×500 canvas.

use std::fmt::Write as _;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 9] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    out: String,
}

impl Canvas {
    fn new(title: &str) -> Canvas {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        Canvas { out }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.out,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}" stroke-width="{width}"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.out,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{fill}" fill-opacity="{opacity}"/>"#,
            w.max(0.0),
            h.max(0.0)
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Linear map from data range onto the plot's vertical extent.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64) -> Axis {
        if hi > lo {
            Axis { lo, hi }
        } else {
            Axis { lo: lo - 1.0, hi: lo + 1.0 }
        }
    }

    fn y(&self, v: f64) -> f64 {
        let h = HEIGHT - TOP - BOTTOM;
        HEIGHT - BOTTOM - (v - self.lo) / (self.hi - self.lo) * h
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=5).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 5.0).collect()
    }
}

fn frame(c: &mut Canvas, left: &Axis, left_label: &str, right: Option<(&Axis, &str)>, x_label: &str) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    c.line(x0, HEIGHT - BOTTOM, x1, HEIGHT - BOTTOM, "black", 1.0);
    c.line(x0, TOP, x0, HEIGHT - BOTTOM, "black", 1.0);
    for t in left.ticks() {
        let y = left.y(t);
        c.line(x0 - 4.0, y, x0, y, "black", 1.0);
        c.line(x0, y, x1, y, "#dddddd", 0.5);
        c.text(x0 - 8.0, y + 4.0, "end", &format!("{t:.1}"));
    }
    c.text(18.0, TOP - 12.0, "start", left_label);
    if let Some((axis, label)) = right {
        c.line(x1, TOP, x1, HEIGHT - BOTTOM, "black", 1.0);
        for t in axis.ticks() {
            let y = axis.y(t);
            c.line(x1, y, x1 + 4.0, y, "black", 1.0);
            c.text(x1 + 8.0, y + 4.0, "start", &format!("{t:.1}"));
        }
        c.text(WIDTH - 18.0, TOP - 12.0, "end", label);
    }
    c.text(WIDTH / 2.0, HEIGHT - 20.0, "middle", x_label);
}

pub struct Series {
    pub name: String,
    /// One value per category; `None` leaves a gap.
    pub values: Vec<Option<f64>>,
}

/// Grouped bars for `bars` (left axis) with `lines` drawn over the same
/// categories against a right axis.
pub fn bars_and_lines(
    title: &str,
    categories: &[String],
    x_label: &str,
    bars: &[Series],
    bar_label: &str,
    lines: &[Series],
    line_label: &str,
) -> String {
    let mut c = Canvas::new(title);
    let finite = |s: &[Series]| -> Vec<f64> { s.iter().flat_map(|s| s.values.iter().flatten().copied()).collect() };
    let bar_vals = finite(bars);
    let bar_lo = bar_vals.iter().copied().fold(100.0, f64::min);
    let left = Axis::new((bar_lo - 5.0).clamp(0.0, 100.0).floor(), 100.0);
    let line_vals = finite(lines);
    let (lmin, lmax) = line_vals
        .iter()
        .fold((0.0f64, 1.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let right = Axis::new(lmin.floor(), lmax.ceil());
    frame(&mut c, &left, bar_label, Some((&right, line_label)), x_label);

    let plot_w = WIDTH - LEFT - RIGHT;
    let slot = plot_w / categories.len().max(1) as f64;
    let bar_w = slot * 0.7 / bars.len().max(1) as f64;
    let centre = |k: usize| LEFT + slot * (k as f64 + 0.5);
    for (k, cat) in categories.iter().enumerate() {
        c.text(centre(k), HEIGHT - BOTTOM + 18.0, "middle", cat);
    }
    for (i, s) in bars.iter().enumerate() {
        for (k, v) in s.values.iter().enumerate() {
            if let Some(v) = v {
                let x = centre(k) - slot * 0.35 + i as f64 * bar_w;
                let y = left.y(v.max(left.lo));
                c.rect(x, y, bar_w * 0.9, HEIGHT - BOTTOM - y, color(i), 0.8);
            }
        }
    }
    for (i, s) in lines.iter().enumerate() {
        let pts: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|v| format!("{:.1},{:.1}", centre(k), right.y(v))))
            .collect();
        let _ = writeln!(
            c.out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2" stroke-dasharray="6 3"/>"#,
            pts.join(" "),
            color(i)
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(c.out, r#"<circle cx="{x}" cy="{y}" r="3.5" fill="{}"/>"#, color(i));
        }
    }
    let mut ly = TOP + 8.0;
    for (i, s) in bars.iter().enumerate() {
        c.rect(LEFT + 10.0, ly - 9.0, 12.0, 10.0, color(i), 0.8);
        c.text(LEFT + 28.0, ly, "start", &format!("{} ({bar_label})", s.name));
        ly += 16.0;
    }
    for (i, s) in lines.iter().enumerate() {
        c.line(LEFT + 10.0, ly - 4.0, LEFT + 22.0, ly - 4.0, color(i), 2.0);
        c.text(LEFT + 28.0, ly, "start", &format!("{} ({line_label})", s.name));
        ly += 16.0;
    }
    c.finish()
}

/// Two overlaid histograms sharing bin edges.
pub fn overlaid_histogram(title: &str, edges: &[f64], total: &[u64], correct: &[u64]) -> String {
    let mut c = Canvas::new(title);
    let max = total.iter().copied().max().unwrap_or(0).max(1) as f64;
    let axis = Axis::new(0.0, max);
    frame(&mut c, &axis, "samples", None, "prediction time (s)");
    let (lo, hi) = (edges.first().copied().unwrap_or(0.0), edges.last().copied().unwrap_or(1.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |v: f64| LEFT + (v - lo) / span * (WIDTH - LEFT - RIGHT);
    for (k, w) in edges.windows(2).enumerate() {
        let (x0, x1) = (x(w[0]), x(w[1]));
        let yt = axis.y(total[k] as f64);
        let yc = axis.y(correct[k] as f64);
        c.rect(x0, yt, x1 - x0 - 1.0, HEIGHT - BOTTOM - yt, color(0), 0.35);
        c.rect(x0, yc, x1 - x0 - 1.0, HEIGHT - BOTTOM - yc, color(1), 0.8);
    }
    let ticks = edges.len().saturating_sub(1).clamp(1, 12);
    for i in 0..=ticks {
        let v = lo + span * i as f64 / ticks as f64;
        c.text(x(v), HEIGHT - BOTTOM + 18.0, "middle", &format!("{v:.2}"));
    }
    c.rect(WIDTH - RIGHT - 170.0, TOP, 12.0, 10.0, color(0), 0.35);
    c.text(WIDTH - RIGHT - 152.0, TOP + 9.0, "start", "all LC samples");
    c.rect(WIDTH - RIGHT - 170.0, TOP + 16.0, 12.0, 10.0, color(1), 0.8);
    c.text(WIDTH - RIGHT - 152.0, TOP + 25.0, "start", "correctly classified");
    c.finish()
}

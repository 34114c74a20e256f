//! Minimal SVG charts for the run report: line charts with shaded bands and
//! cell heatmaps.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// A polyline; NaN values break the line.
pub struct Line {
    pub label: String,
    pub color: String,
    pub dashed: bool,
    pub y: Vec<f64>,
}

/// A shaded region between two curves.
pub struct Band {
    pub color: String,
    pub opacity: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Line chart over a shared x axis.
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x: Vec<f64>,
    pub lines: Vec<Line>,
    pub bands: Vec<Band>,
    /// Optional vertical marker, e.g. the data cutoff.
    pub marker: Option<f64>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + hi.abs()) {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let (x0, x1) = range(self.x.iter().copied());
        let ys = self
            .lines
            .iter()
            .flat_map(|l| l.y.iter())
            .chain(self.bands.iter().flat_map(|b| b.lo.iter().chain(&b.hi)))
            .copied();
        let (y0, y1) = range(ys);
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            esc(&self.title)
        );
        for t in ticks(x0, x1) {
            let _ = writeln!(
                s,
                r##"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="#ddd"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle">{4}</text>"##,
                sx(t),
                TOP,
                TOP + ph,
                TOP + ph + 16.0,
                fmt_tick(t)
            );
        }
        for t in ticks(y0, y1) {
            let _ = writeln!(
                s,
                r##"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="#ddd"/><text x="{3:.1}" y="{4:.1}" text-anchor="end">{5}</text>"##,
                LEFT,
                sy(t),
                LEFT + pw,
                LEFT - 6.0,
                sy(t) + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );
        for b in &self.bands {
            let mut pts = Vec::new();
            for (i, &x) in self.x.iter().enumerate() {
                if b.hi[i].is_finite() {
                    pts.push(format!("{:.2},{:.2}", sx(x), sy(b.hi[i])));
                }
            }
            for (i, &x) in self.x.iter().enumerate().rev() {
                if b.lo[i].is_finite() {
                    pts.push(format!("{:.2},{:.2}", sx(x), sy(b.lo[i])));
                }
            }
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{}" fill-opacity="{}" stroke="none"/>"#,
                pts.join(" "),
                b.color,
                b.opacity
            );
        }
        for l in &self.lines {
            let mut d = String::new();
            let mut pen_up = true;
            for (&x, &y) in self.x.iter().zip(&l.y) {
                if !y.is_finite() {
                    pen_up = true;
                    continue;
                }
                let _ = write!(
                    d,
                    "{}{:.2},{:.2} ",
                    if pen_up { "M" } else { "L" },
                    sx(x),
                    sy(y)
                );
                pen_up = false;
            }
            let dash = if l.dashed {
                r#" stroke-dasharray="6 4""#
            } else {
                ""
            };
            let _ = writeln!(
                s,
                r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
                d.trim_end(),
                l.color
            );
        }
        if let Some(m) = self.marker.filter(|m| (x0..=x1).contains(m)) {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.1}" y1="{1}" x2="{0:.1}" y2="{2}" stroke="black" stroke-dasharray="2 3"/>"#,
                sx(m),
                TOP,
                TOP + ph
            );
        }
        for (n, l) in self.lines.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * n as f64;
            let x = LEFT + pw - 150.0;
            let _ = writeln!(
                s,
                r#"<line x1="{x}" y1="{0}" x2="{1}" y2="{0}" stroke="{2}" stroke-width="2"/><text x="{3}" y="{4}">{5}</text>"#,
                y,
                x + 20.0,
                l.color,
                x + 26.0,
                y + 4.0,
                esc(&l.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Cell heatmap of a row-major `[ny x nx]` field, north up. Cells marked
/// in `mask` are drawn grey; `points` are overlaid as labelled dots.
pub fn heatmap(
    title: &str,
    nx: usize,
    ny: usize,
    values: &[f64],
    mask: &[bool],
    points: &[(usize, usize, String)],
) -> String {
    let cell = (560.0 / nx.max(ny) as f64).max(1.0);
    let w = cell * nx as f64 + 2.0 * LEFT;
    let h = cell * ny as f64 + TOP + 20.0;
    let top = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(v, _)| *v)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        esc(title)
    );
    for j in 0..ny {
        for i in 0..nx {
            let p = j * nx + i;
            let color = if mask[p] {
                "#999999".to_string()
            } else {
                let f = if top > 0.0 {
                    (values[p] / top).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                // white to dark blue
                let r = (255.0 * (1.0 - f)) as u8;
                let g = (255.0 * (1.0 - 0.7 * f)) as u8;
                format!("#{r:02x}{g:02x}ff")
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                LEFT + i as f64 * cell,
                TOP + (ny - 1 - j) as f64 * cell,
                cell + 0.05,
                cell + 0.05
            );
        }
    }
    for (i, j, label) in points {
        let cx = LEFT + (*i as f64 + 0.5) * cell;
        let cy = TOP + (ny as f64 - 1.0 - *j as f64 + 0.5) * cell;
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{:.1}" fill="red" stroke="black"/><text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
            (cell * 0.45).max(3.0),
            cx + 5.0,
            cy - 5.0,
            esc(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">colour scale 0 to {} m</text>"#,
        w / 2.0,
        h - 4.0,
        fmt_tick(top)
    );
    s.push_str("</svg>\n");
    s
}

//! Static figures: loss curves and metric bar charts as SVG, slice overlays
//! as PNG.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// One named line of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Series parsed from a training history CSV: one per loss column that has
/// at least one value, x being the step.
pub fn history_series(csv: &str) -> Result<Vec<Series>, String> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or("history is empty")?.split(',').collect();
    let step_col = header
        .iter()
        .position(|h| *h == "step")
        .ok_or("history has no step column")?;
    let loss_cols: Vec<usize> = (0..header.len())
        .filter(|&i| header[i].starts_with("L_"))
        .collect();
    let mut series: Vec<Series> = loss_cols
        .iter()
        .map(|&i| Series {
            name: header[i].to_string(),
            points: Vec::new(),
        })
        .collect();
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(format!(
                "history row {} has {} columns, expected {}",
                n + 1,
                cells.len(),
                header.len()
            ));
        }
        let step: f64 = cells[step_col]
            .parse()
            .map_err(|_| format!("history row {} has a bad step {:?}", n + 1, cells[step_col]))?;
        for (s, &i) in series.iter_mut().zip(&loss_cols) {
            if cells[i].is_empty() {
                continue;
            }
            let v: f64 = cells[i].parse().map_err(|_| {
                format!(
                    "history row {} has a bad {} value {:?}",
                    n + 1,
                    header[i],
                    cells[i]
                )
            })?;
            s.points.push((step, v));
        }
    }
    series.retain(|s| !s.points.is_empty());
    if series.is_empty() {
        return Err("history has no loss values".into());
    }
    Ok(series)
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT
            + (x - self.x0) / (self.x1 - self.x0).max(f64::EPSILON)
                * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT
            - MARGIN_BOTTOM
            - (y - self.y0) / (self.y1 - self.y0).max(f64::EPSILON)
                * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }

    fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str, xticks: bool) {
        let (l, r) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
        let (t, b) = (MARGIN_TOP, HEIGHT - MARGIN_BOTTOM);
        let _ = writeln!(out, r#"<g class="axes" stroke="black" fill="none">"#);
        let _ = writeln!(
            out,
            r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/>"#
        );
        let _ = writeln!(out, "</g>");
        for y in ticks(self.y0, self.y1, 5) {
            let py = self.py(y);
            let _ = writeln!(
                out,
                r##"<line x1="{}" y1="{py:.2}" x2="{l}" y2="{py:.2}" stroke="black"/><line x1="{l}" y1="{py:.2}" x2="{r}" y2="{py:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                l - 5.0,
                l - 8.0,
                py + 4.0,
                fmt_tick(y)
            );
        }
        if xticks {
            for x in ticks(self.x0, self.x1, 8) {
                let px = self.px(x);
                let _ = writeln!(
                    out,
                    r#"<line x1="{px:.2}" y1="{b}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
                    b + 5.0,
                    b + 18.0,
                    fmt_tick(x)
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (l + r) / 2.0,
            HEIGHT - 10.0,
            escape(xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
            (t + b) / 2.0,
            escape(ylabel)
        );
    }
}

fn legend(out: &mut String, names: &[&str]) {
    let x = WIDTH - MARGIN_RIGHT + 15.0;
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="14" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 20.0,
            y,
            escape(name)
        );
    }
}

/// Line chart with one polyline per series; every point of every series is
/// drawn, in order.
pub fn line_chart_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let (mut x0, mut x1) = all().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, _)| {
        (a.min(x), b.max(x))
    });
    let y1 = all().fold(f64::NEG_INFINITY, |a, (_, y)| a.max(y));
    let y0 = all().fold(0f64, |a, (_, y)| a.min(y));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let y1 = if y1.is_finite() && y1 > y0 {
        y1 * 1.05
    } else {
        y0 + 1.0
    };
    let frame = Frame { x0, x1, y0, y1 };
    let mut out = String::new();
    svg_open(&mut out, title);
    frame.axes(&mut out, xlabel, ylabel, true);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-series="{}" data-points="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.name),
            s.points.len(),
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one group per row, one bar per metric.
pub fn bar_chart_svg(title: &str, metrics: &[&str], groups: &[(String, Vec<f64>)]) -> String {
    let ymax = groups
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(1f64, f64::max);
    let frame = Frame {
        x0: 0.0,
        x1: groups.len().max(1) as f64,
        y0: 0.0,
        y1: ymax,
    };
    let mut out = String::new();
    svg_open(&mut out, title);
    frame.axes(&mut out, "", "value", false);
    let slot = frame.px(1.0) - frame.px(0.0);
    let bar = slot * 0.8 / metrics.len().max(1) as f64;
    for (g, (name, values)) in groups.iter().enumerate() {
        let left = frame.px(g as f64) + slot * 0.1;
        for (m, metric) in metrics.iter().enumerate() {
            let v = values.get(m).copied().unwrap_or(f64::NAN);
            let shown = if v.is_finite() { v.max(0.0) } else { 0.0 };
            let top = frame.py(shown);
            let _ = writeln!(
                out,
                r#"<rect class="bar" data-group="{}" data-metric="{}" data-value="{v}" x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                escape(name),
                metric,
                left + bar * m as f64,
                bar,
                frame.py(0.0) - top,
                PALETTE[m % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            frame.px(g as f64 + 0.5),
            HEIGHT - MARGIN_BOTTOM + 18.0,
            escape(name)
        );
    }
    legend(&mut out, metrics);
    out.push_str("</svg>\n");
    out
}

/// Foreground pixels with a 4-neighbour in the background (or on the image
/// border).
pub fn contour(mask: ArrayView2<'_, f32>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let on = |r: usize, c: usize| mask[[r, c]] > 0.5;
    Array2::from_shape_fn((h, w), |(r, c)| {
        on(r, c)
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !on(r - 1, c)
                || !on(r + 1, c)
                || !on(r, c - 1)
                || !on(r, c + 1))
    })
}

pub const GT_COLOUR: Rgb<u8> = Rgb([0, 220, 0]);
pub const PRED_COLOUR: Rgb<u8> = Rgb([230, 0, 0]);

/// Two panels side by side, each the grey-scaled `background` enlarged by
/// `scale`: the left one outlines `gt`, the right one `pred`.
pub fn overlay_png(
    background: ArrayView2<'_, f32>,
    gt: ArrayView2<'_, f32>,
    pred: ArrayView2<'_, f32>,
    scale: u32,
) -> RgbImage {
    assert_eq!(
        background.dim(),
        gt.dim(),
        "background and ground truth differ in shape"
    );
    assert_eq!(
        background.dim(),
        pred.dim(),
        "background and prediction differ in shape"
    );
    let (h, w) = background.dim();
    let scale = scale.max(1);
    let (lo, hi) = background
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let edges = [contour(gt), contour(pred)];
    let colours = [GT_COLOUR, PRED_COLOUR];
    let panel_w = w as u32 * scale;
    let mut img = RgbImage::new(2 * panel_w, h as u32 * scale);
    for (panel, (edge, colour)) in edges.iter().zip(colours).enumerate() {
        for r in 0..h {
            for c in 0..w {
                let px = if edge[[r, c]] {
                    colour
                } else {
                    let g = (((background[[r, c]] - lo) / span) * 255.0)
                        .round()
                        .clamp(0.0, 255.0) as u8;
                    Rgb([g, g, g])
                };
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(
                            panel as u32 * panel_w + c as u32 * scale + dx,
                            r as u32 * scale + dy,
                            px,
                        );
                    }
                }
            }
        }
    }
    img
}

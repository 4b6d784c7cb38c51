//! Static SVG line plots with shaded anomaly segments.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

const WIDTH: f64 = 1200.0;
const PANEL_HEIGHT: f64 = 150.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const GAP: f64 = 34.0;
/// Above this many points per pixel column a line is reduced to its
/// per-column minimum and maximum.
const MAX_COLUMNS: usize = 1100;

pub struct Line<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub values: &'a [f64],
}

pub struct Panel<'a> {
    pub title: &'a str,
    pub lines: Vec<Line<'a>>,
    /// Horizontal reference line, e.g. the detection threshold.
    pub hline: Option<f64>,
}

/// Maximal runs of `1` as half-open index ranges.
pub fn segments(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().chain(std::iter::once(&0)).enumerate() {
        match (l == 1, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Min/max decimation that keeps spikes visible.
fn decimate(values: &[f64]) -> Vec<(usize, f64)> {
    let n = values.len();
    if n <= 2 * MAX_COLUMNS {
        return values.iter().copied().enumerate().collect();
    }
    let mut out = Vec::with_capacity(2 * MAX_COLUMNS);
    for col in 0..MAX_COLUMNS {
        let lo = col * n / MAX_COLUMNS;
        let hi = ((col + 1) * n / MAX_COLUMNS).max(lo + 1);
        let (mut imin, mut imax) = (lo, lo);
        for i in lo..hi {
            if values[i] < values[imin] {
                imin = i;
            }
            if values[i] > values[imax] {
                imax = i;
            }
        }
        out.push((imin.min(imax), values[imin.min(imax)]));
        if imin != imax {
            out.push((imin.max(imax), values[imin.max(imax)]));
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders stacked panels over a shared index axis.
pub fn render(title: &str, panels: &[Panel<'_>], labels: &[u8]) -> String {
    let n = panels
        .iter()
        .flat_map(|p| p.lines.iter().map(|l| l.values.len()))
        .max()
        .unwrap_or(0)
        .max(labels.len())
        .max(2);
    let height = 40.0 + panels.len() as f64 * (PANEL_HEIGHT + GAP);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let x_of = |i: usize| MARGIN_LEFT + plot_w * i as f64 / (n - 1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN_LEFT}" y="20" font-size="14">{}</text>"#, escape(title));

    for (k, panel) in panels.iter().enumerate() {
        let top = 40.0 + k as f64 * (PANEL_HEIGHT + GAP);
        let bottom = top + PANEL_HEIGHT;
        let finite = panel
            .lines
            .iter()
            .flat_map(|l| l.values.iter().copied())
            .chain(panel.hline)
            .filter(|v| v.is_finite());
        let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let y_of = |v: f64| bottom - (v - lo) / (hi - lo) * PANEL_HEIGHT;

        for (a, b) in segments(labels) {
            let x0 = x_of(a);
            let x1 = x_of(b.min(n - 1)).max(x0 + 1.0);
            let _ = writeln!(
                s,
                r##"<rect x="{x0:.2}" y="{top}" width="{:.2}" height="{PANEL_HEIGHT}" fill="#d62728" fill-opacity="0.15"/>"##,
                x1 - x0
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_LEFT}" y="{top}" width="{plot_w}" height="{PANEL_HEIGHT}" fill="none" stroke="#888"/>"##
        );
        let _ = writeln!(s, r#"<text x="{MARGIN_LEFT}" y="{}">{}</text>"#, top - 6.0, escape(panel.title));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#, MARGIN_LEFT - 4.0, top + 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{bottom}" text-anchor="end">{lo:.3}</text>"#, MARGIN_LEFT - 4.0);

        for (j, line) in panel.lines.iter().enumerate() {
            let pts: Vec<String> = decimate(line.values)
                .into_iter()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1" points="{}"/>"#,
                line.color,
                pts.join(" ")
            );
            let lx = WIDTH - MARGIN_RIGHT - 140.0 * (panel.lines.len() - j) as f64;
            let _ = writeln!(
                s,
                r#"<text x="{lx}" y="{}" fill="{}">{}</text>"#,
                top - 6.0,
                line.color,
                escape(line.label)
            );
        }
        if let Some(h) = panel.hline {
            let y = y_of(h);
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_LEFT}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#2ca02c" stroke-dasharray="4 3"/>"##,
                WIDTH - MARGIN_RIGHT
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_runs() {
        assert_eq!(segments(&[0, 1, 1, 0, 1]), vec![(1, 3), (4, 5)]);
        assert!(segments(&[0, 0]).is_empty());
    }

    #[test]
    fn decimation_keeps_extremes() {
        let mut v = vec![0.0; 100_000];
        v[54_321] = 9.0;
        v[7] = -3.0;
        let d = decimate(&v);
        assert!(d.len() <= 2 * MAX_COLUMNS);
        assert!(d.contains(&(54_321, 9.0)) && d.contains(&(7, -3.0)));
        assert!(d.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn renders_one_polyline_per_line() {
        let a = [1.0, 2.0, 3.0];
        let svg = render(
            "t<x>",
            &[Panel {
                title: "p",
                lines: vec![
                    Line { label: "a", color: "black", values: &a },
                    Line { label: "b", color: "red", values: &a },
                ],
                hline: Some(2.0),
            }],
            &[0, 1, 0],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t&lt;x&gt;"));
        assert!(svg.ends_with("</svg>\n"));
    }
}

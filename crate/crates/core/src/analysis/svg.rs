//! Standalone SVG figures for count histograms and system x MOS grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Histogram, MosGrid};
use crate::data::UtteranceRecord;
use crate::error::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 130.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 70.0;
const SPLIT_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Per-split system means drawn as circles on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOverlay {
    pub split: String,
    /// system -> (mean MOS, utterance count)
    pub points: BTreeMap<String, (f64, usize)>,
}

impl GridOverlay {
    pub fn from_records(split: &str, records: &[UtteranceRecord]) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in records {
            let e = sums.entry(r.system_id.clone()).or_insert((0.0, 0));
            e.0 += r.mos;
            e.1 += 1;
        }
        GridOverlay {
            split: split.to_string(),
            points: sums
                .into_iter()
                .map(|(s, (sum, n))| (s, (sum / n as f64, n)))
                .collect(),
        }
    }
}

pub enum Figure<'a> {
    Histogram(&'a Histogram),
    Grid(&'a MosGrid, &'a [GridOverlay]),
}

pub fn render_svg(figure: &Figure<'_>, path: impl AsRef<Path>) -> Result<()> {
    let text = match figure {
        Figure::Histogram(h) => histogram_svg(h),
        Figure::Grid(g, overlays) => grid_svg(g, overlays),
    };
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0) = (MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM);
    let (x1, y1) = (WIDTH - MARGIN_RIGHT, MARGIN_TOP);
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>
<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>
<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text class="y-label" x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0,
        escape(x_label),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn fmt_edge(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn histogram_svg(h: &Histogram) -> String {
    let mut out = String::new();
    header(&mut out, if h.title.is_empty() { "Histogram" } else { &h.title });
    axes(&mut out, &h.x_label, &h.y_label);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = plot_w / h.counts.len() as f64;
    let base = HEIGHT - MARGIN_BOTTOM;

    // y ticks at 0, max/2, max
    for frac in [0.0, 0.5, 1.0] {
        let y = base - frac * plot_h;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.0}</text>"#,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            frac * max
        );
    }
    for (i, &c) in h.counts.iter().enumerate() {
        let x = MARGIN_LEFT + i as f64 * bar_w;
        let bh = c as f64 / max * plot_h;
        let _ = writeln!(
            out,
            r##"<rect class="bar" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0" stroke="white"><title>[{}, {}{}: {c}</title></rect>"##,
            x,
            base - bh,
            bar_w,
            bh,
            fmt_edge(h.edges[i]),
            fmt_edge(h.edges[i + 1]),
            if i + 1 == h.counts.len() { "]" } else { ")" },
        );
    }
    let stride = h.counts.len().div_ceil(12).max(1);
    for (i, e) in h.edges.iter().enumerate().step_by(stride) {
        let _ = writeln!(
            out,
            r#"<text class="tick" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + i as f64 * bar_w,
            base + 16.0,
            fmt_edge(*e)
        );
    }
    if h.underflow + h.overflow > 0 {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}">outside range: {}</text>"#,
            WIDTH - MARGIN_RIGHT + 8.0,
            MARGIN_TOP + 12.0,
            h.underflow + h.overflow
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn grid_svg(grid: &MosGrid, overlays: &[GridOverlay]) -> String {
    let mut out = String::new();
    header(&mut out, "Utterance MOS per system");
    axes(&mut out, "system (ordered by MOS)", "MOS");

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let base = HEIGHT - MARGIN_BOTTOM;
    let lo = grid.mos_edges[0];
    let hi = *grid.mos_edges.last().unwrap();
    let y_of = |mos: f64| base - (mos - lo) / (hi - lo) * plot_h;
    let col_w = plot_w / grid.systems.len().max(1) as f64;
    let max = grid.cells.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;

    for e in &grid.mos_edges {
        if e.fract() == 0.0 {
            let _ = writeln!(
                out,
                r#"<text class="tick" x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 6.0,
                y_of(*e) + 4.0,
                fmt_edge(*e)
            );
        }
    }

    for (s, sys) in grid.systems.iter().enumerate() {
        let x = MARGIN_LEFT + s as f64 * col_w;
        let _ = writeln!(out, r#"<g class="column" data-system="{}">"#, escape(sys));
        for (b, &c) in grid.cells[s].iter().enumerate() {
            if c == 0 {
                continue;
            }
            let (top, bottom) = (y_of(grid.mos_edges[b + 1]), y_of(grid.mos_edges[b]));
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="black" fill-opacity="{:.3}"><title>{}: {c}</title></rect>"#,
                x,
                top,
                col_w,
                bottom - top,
                0.15 + 0.85 * c as f64 / max,
                escape(sys)
            );
        }
        out.push_str("</g>\n");
    }

    for (k, overlay) in overlays.iter().enumerate() {
        let color = SPLIT_COLORS[k % SPLIT_COLORS.len()];
        let _ = writeln!(
            out,
            r#"<g class="overlay" data-split="{}" fill="none" stroke="{color}">"#,
            escape(&overlay.split)
        );
        for (s, sys) in grid.systems.iter().enumerate() {
            if let Some(&(mean, count)) = overlay.points.get(sys) {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}"><title>{} {}: {:.3} (n={count})</title></circle>"#,
                    MARGIN_LEFT + (s as f64 + 0.5) * col_w,
                    y_of(mean),
                    1.5 * (count as f64).sqrt(),
                    escape(&overlay.split),
                    escape(sys),
                    mean
                );
            }
        }
        out.push_str("</g>\n");
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{:.1}" r="5" fill="none" stroke="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - MARGIN_RIGHT + 14.0,
            MARGIN_TOP + 10.0 + 18.0 * k as f64,
            WIDTH - MARGIN_RIGHT + 24.0,
            MARGIN_TOP + 14.0 + 18.0 * k as f64,
            escape(&overlay.split)
        );
    }
    out.push_str("</svg>\n");
    out
}

//! Minimal SVG renderer for trade-off curves: clean accuracy (left panel)
//! and attacked accuracy (right panel) against compression ratio on a log
//! x-axis, one series per (pipeline, bits).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use atmc_core::harness::{read_csv, MetricsRow};

const COLORS: &[&str] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
]
.as_slice();

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 320.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_B: f64 = 44.0;
const MARGIN_T: f64 = 28.0;

pub fn render(csv: &Path, out: &Path) -> Result<()> {
    let rows = read_csv(csv).with_context(|| format!("reading {}", csv.display()))?;
    if rows.is_empty() {
        bail!("{}: no data rows", csv.display());
    }
    let svg = render_svg(&rows)?;
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn series_key(row: &MetricsRow) -> String {
    format!("{}-{}bit", row.pipeline, row.bits)
}

fn render_svg(rows: &[MetricsRow]) -> Result<String> {
    let mut series: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in rows {
        if !(r.compression_ratio > 0.0) {
            bail!("non-positive compression ratio in CSV");
        }
        series
            .entry(series_key(r))
            .or_default()
            .push((r.compression_ratio, r.ta, r.ata));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    let x_min = rows
        .iter()
        .map(|r| r.compression_ratio)
        .fold(f64::INFINITY, f64::min)
        .log10()
        .floor();
    let x_max = rows
        .iter()
        .map(|r| r.compression_ratio)
        .fold(0.0f64, f64::max)
        .log10()
        .ceil()
        .max(x_min + 1.0);

    let total_w = 2.0 * (MARGIN_L + PANEL_W) + 170.0;
    let total_h = MARGIN_T + PANEL_H + MARGIN_B;
    let mut s = String::new();
    write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="12">"#,
        total_w, total_h
    )?;
    write!(s, r#"<rect width="100%" height="100%" fill="white"/>"#)?;

    for (panel, (title, pick)) in [
        ("benign accuracy", 1usize),
        ("attacked accuracy", 2usize),
    ]
    .iter()
    .map(|(t, p)| (*t, *p))
    .enumerate()
    .map(|(i, tp)| (i, tp))
    {
        let ox = MARGIN_L + panel as f64 * (PANEL_W + MARGIN_L);
        let oy = MARGIN_T;
        draw_axes(&mut s, ox, oy, x_min, x_max, title)?;
        for (si, (_, pts)) in series.iter().enumerate() {
            let color = COLORS[si % COLORS.len()];
            let mut path = String::new();
            for (j, &(cr, ta, ata)) in pts.iter().enumerate() {
                let y_val = if pick == 1 { ta } else { ata };
                let x = ox + (cr.log10() - x_min) / (x_max - x_min) * PANEL_W;
                let y = oy + (1.0 - y_val) * PANEL_H;
                write!(path, "{}{:.2},{:.2}", if j == 0 { "M" } else { "L" }, x, y)?;
                write!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                    x, y, color
                )?;
            }
            if pts.len() > 1 {
                write!(
                    s,
                    r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                    path, color
                )?;
            }
        }
    }

    // Legend.
    let lx = 2.0 * (MARGIN_L + PANEL_W) + 16.0;
    for (si, key) in series.keys().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let y = MARGIN_T + 14.0 + si as f64 * 18.0;
        write!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx,
            y - 10.0,
            color,
            lx + 18.0,
            y,
            key
        )?;
    }
    write!(s, "</svg>")?;
    Ok(s)
}

fn draw_axes(
    s: &mut String,
    ox: f64,
    oy: f64,
    x_min: f64,
    x_max: f64,
    title: &str,
) -> Result<()> {
    write!(
        s,
        r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        ox, oy, PANEL_W, PANEL_H
    )?;
    write!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-weight="bold">{}</text>"#,
        ox + PANEL_W / 2.0 - 50.0,
        oy - 8.0,
        title
    )?;
    // y ticks every 0.25
    for i in 0..=4 {
        let val = i as f64 * 0.25;
        let y = oy + (1.0 - val) * PANEL_H;
        write!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ccc"/><text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"##,
            ox,
            y,
            ox + PANEL_W,
            y,
            ox - 6.0,
            y + 4.0,
            val
        )?;
    }
    // x ticks at decades
    let mut d = x_min;
    while d <= x_max + 1e-9 {
        let x = ox + (d - x_min) / (x_max - x_min) * PANEL_W;
        write!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ccc"/><text x="{:.1}" y="{:.1}" text-anchor="middle">1e{:.0}</text>"##,
            x,
            oy,
            x,
            oy + PANEL_H,
            x,
            oy + PANEL_H + 16.0,
            d
        )?;
        d += 1.0;
    }
    write!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">compression ratio</text>"#,
        ox + PANEL_W / 2.0,
        oy + PANEL_H + 34.0
    )?;
    Ok(())
}

//! Writers for the csv, json and svg-plot-data formats. Every file carries
//! the manifest id: a `# manifest <id>` first line in CSV, a `manifest`
//! field in JSON and a leading comment in SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Format;
use crate::table::{Cell, Table};
use crate::CliError;

/// All tables of a run; the source for `export`.
pub const TABLES_FILE: &str = "tables.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDocument {
    pub manifest: String,
    pub table: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStore {
    pub manifest: String,
    pub tables: Vec<Table>,
}

impl TableStore {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::write(dir.join(TABLES_FILE), serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(TABLES_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn csv_string(table: &Table, manifest: &str) -> Result<String, CliError> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(Cell::text))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?)
        .expect("csv output is utf-8");
    Ok(format!("# manifest {manifest}\n{body}"))
}

pub fn json_string(table: &Table, manifest: &str) -> Result<String, CliError> {
    let doc = TableDocument {
        manifest: manifest.to_string(),
        table: table.name.clone(),
        columns: table.columns.clone(),
        rows: table.rows.clone(),
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Writes `tables` in `format` into `dir` and returns the file names.
pub fn write_format(dir: &Path, tables: &[Table], manifest: &str, format: Format) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    match format {
        Format::Csv | Format::Json => {
            for t in tables {
                let (name, text) = if format == Format::Csv {
                    (format!("{}.csv", t.name), csv_string(t, manifest)?)
                } else {
                    (format!("{}.json", t.name), json_string(t, manifest)?)
                };
                std::fs::write(dir.join(&name), text)?;
                written.push(name);
            }
        }
        Format::SvgPlotData => {
            for (name, svg) in plots(tables, manifest) {
                std::fs::write(dir.join(&name), svg)?;
                written.push(name);
            }
        }
    }
    Ok(written)
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    color: &'static str,
    dashed: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line plots for density snapshots and filter trajectories.
pub fn plots(tables: &[Table], manifest: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Some(t) = tables.iter().find(|t| t.name == "densities") {
        if let Some(svg) = density_plot(t, manifest) {
            out.push(("densities.svg".to_string(), svg));
        }
    }
    let paths = tables.iter().find(|t| t.name == "paths");
    for t in tables.iter().filter(|t| t.name.starts_with("filter_")) {
        let index: f64 = t.name.trim_start_matches("filter_").parse().unwrap_or(0.0);
        if let Some(svg) = filter_plot(t, paths, index, manifest) {
            out.push((format!("{}.svg", t.name), svg));
        }
    }
    out
}

/// Groups `(x, value)` pairs by snapshot time; for two-dimensional grids the
/// values are integrated over `x2` to give the `x1` marginal.
fn snapshots(t: &Table, value: &str) -> Option<BTreeMap<u64, Vec<(f64, f64)>>> {
    let times = t.numbers("t")?;
    let x1 = t.numbers("x1")?;
    let v = t.numbers(value)?;
    let x2 = t.numbers("x2");
    let mut by_time: BTreeMap<u64, BTreeMap<u64, f64>> = BTreeMap::new();
    let h2 = x2.as_ref().map(|x2| {
        let mut u: Vec<f64> = x2.clone();
        u.sort_by(f64::total_cmp);
        u.dedup();
        if u.len() > 1 { u[1] - u[0] } else { 1.0 }
    });
    for i in 0..times.len() {
        if !v[i].is_finite() {
            continue;
        }
        let w = h2.unwrap_or(1.0);
        *by_time.entry(times[i].to_bits()).or_default().entry(x1[i].to_bits()).or_insert(0.0) += w * v[i];
    }
    Some(
        by_time
            .into_iter()
            .map(|(t, m)| {
                let mut pts: Vec<(f64, f64)> = m.into_iter().map(|(x, y)| (f64::from_bits(x), y)).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (t, pts)
            })
            .collect(),
    )
}

fn density_plot(t: &Table, manifest: &str) -> Option<String> {
    let grid = snapshots(t, "density")?;
    let exact = snapshots(t, "closed_form");
    let mut series = Vec::new();
    for (k, (time, pts)) in grid.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let tv = f64::from_bits(*time);
        series.push(Series { label: format!("grid t={tv}"), points: pts.clone(), color, dashed: false });
        if let Some(e) = exact.as_ref().and_then(|e| e.get(time)) {
            if !e.is_empty() {
                series.push(Series { label: format!("closed form t={tv}"), points: e.clone(), color, dashed: true });
            }
        }
    }
    Some(line_plot("Normalized density snapshots", "x1", "density", &series, manifest))
}

fn filter_plot(t: &Table, paths: Option<&Table>, index: f64, manifest: &str) -> Option<String> {
    let times = t.numbers("t")?;
    let mean = t.numbers("xbar1")?;
    let var = t.numbers("Sigma11")?;
    let band = |s: f64| -> Vec<(f64, f64)> {
        times.iter().zip(&mean).zip(&var).map(|((t, m), v)| (*t, m + s * 2.0 * v.max(0.0).sqrt())).collect()
    };
    let mut series = vec![
        Series { label: "xbar1".into(), points: times.iter().copied().zip(mean.iter().copied()).collect(), color: PALETTE[0], dashed: false },
        Series { label: "xbar1 + 2 sd".into(), points: band(1.0), color: PALETTE[0], dashed: true },
        Series { label: "xbar1 - 2 sd".into(), points: band(-1.0), color: PALETTE[0], dashed: true },
    ];
    if let Some(p) = paths {
        if let (Some(pi), Some(pt), Some(px)) = (p.numbers("path"), p.numbers("t"), p.numbers("x1")) {
            let pts: Vec<(f64, f64)> =
                pi.iter().zip(pt.iter().zip(&px)).filter(|(i, _)| **i == index).map(|(_, (t, x))| (*t, *x)).collect();
            if !pts.is_empty() {
                series.push(Series { label: "signal x1".into(), points: pts, color: PALETTE[1], dashed: false });
            }
        }
    }
    Some(line_plot(&format!("Filter trajectory, path {index}"), "t", "x1", &series, manifest))
}

/// Round tick spacing giving about five ticks on `[lo, hi]`.
fn tick_step(lo: f64, hi: f64) -> f64 {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    mag * if f < 1.5 { 1.0 } else if f < 3.5 { 2.0 } else if f < 7.5 { 5.0 } else { 10.0 }
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], manifest: &str) -> String {
    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const L: f64 = 70.0;
    const R: f64 = 190.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let all = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, "<!-- manifest {manifest} -->");
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - L - R,
        H - T - B
    );
    for (lo, hi, horizontal) in [(x0, x1, true), (y0, y1, false)] {
        let step = tick_step(lo, hi);
        let mut v = (lo / step).ceil() * step;
        while v <= hi + 1e-12 * step {
            if horizontal {
                let x = px(v);
                let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, H - B, H - B + 5.0);
                let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, H - B + 18.0, fmt_tick(v));
            } else {
                let y = py(v);
                let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{L}" y2="{y:.2}" stroke="black"/>"#, L - 5.0);
                let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#, L - 8.0, y + 4.0, fmt_tick(v));
            }
            v += step;
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0,
        escape(ylabel)
    );
    for (k, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"><title>{}</title></polyline>"#,
            ser.color,
            pts.join(" "),
            escape(&ser.label)
        );
        let ly = T + 14.0 + 18.0 * k as f64;
        let lx = W - R + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="1.5"{dash}/>"#, lx + 24.0, ser.color);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#, lx + 30.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}
